use crate::scalar::Scalar;

/// Dense 4-D array laid out as `[batch, planes, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub shape: [usize; 4],
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor { shape, data: vec![S::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<S>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape {shape:?} does not fit data");
        Tensor { shape, data }
    }

    /// Batch of flat rows as `[n, 1, 1, dim]`.
    pub fn rows(n: usize, dim: usize, data: Vec<S>) -> Self {
        Self::from_vec([n, 1, 1, dim], data)
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn item(&self, b: usize) -> &[S] {
        let n = self.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape to {shape:?} changes size");
        self.shape = shape;
        self
    }

    /// Same data viewed as `[batch, 1, 1, item_len]`.
    pub fn flatten(self) -> Self {
        let s = [self.shape[0], 1, 1, self.item_len()];
        self.reshape(s)
    }

    pub fn map(mut self, f: impl Fn(S) -> S) -> Self {
        self.data.iter_mut().for_each(|v| *v = f(*v));
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
