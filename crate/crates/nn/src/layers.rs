//! Layers with explicit forward caches and hand-written backward passes.

use eegvae_core::rng::Stream;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

/// Trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<S> {
    pub value: Vec<S>,
    pub grad: Vec<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(value: Vec<S>) -> Self {
        let grad = vec![S::zero(); value.len()];
        Param { value, grad }
    }

    fn constant(n: usize, v: f64) -> Self {
        Self::new(vec![S::of(v); n])
    }

    /// Glorot-uniform initialisation.
    fn glorot(n: usize, fan_in: usize, fan_out: usize, rng: &mut Stream) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot limit");
        Self::new((0..n).map(|_| S::of(dist.sample(rng))).collect())
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = S::zero());
    }
}

pub trait Layer<S: Scalar>: Send + Sync {
    /// Training-mode forward pass; caches what `backward` needs.
    fn forward(&mut self, x: Tensor<S>, rng: &mut Stream) -> Tensor<S>;
    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, dy: Tensor<S>) -> Tensor<S>;
    /// Inference-mode forward pass without side effects.
    fn infer(&self, x: Tensor<S>) -> Tensor<S>;
    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        Vec::new()
    }
    /// Named persistent tensors: parameters and running statistics.
    fn state(&self) -> Vec<(&'static str, &Vec<S>)> {
        Vec::new()
    }
    fn state_mut(&mut self) -> Vec<(&'static str, &mut Vec<S>)> {
        Vec::new()
    }
    fn n_trainable(&self) -> usize {
        0
    }
}

fn take<S>(cache: &mut Option<S>) -> S {
    cache.take().expect("backward called without a preceding forward")
}

/// Convolution along the width axis, shared across rows, with same padding.
///
/// Maps `[B, cin, H, W]` to `[B, cout, H, W]`; `groups` splits planes into
/// independent blocks (depthwise when `groups == cin == cout`).
pub struct Conv1d<S> {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub groups: usize,
    pub weight: Param<S>,
    pub bias: Option<Param<S>>,
    input: Option<Tensor<S>>,
}

impl<S: Scalar> Conv1d<S> {
    pub fn new(cin: usize, cout: usize, kernel: usize, groups: usize, bias: bool, rng: &mut Stream) -> Self {
        assert!(groups >= 1 && cin % groups == 0 && cout % groups == 0 && kernel >= 1);
        let gin = cin / groups;
        let weight = Param::glorot(cout * gin * kernel, gin * kernel, (cout / groups) * kernel, rng);
        Conv1d { cin, cout, kernel, groups, weight, bias: bias.then(|| Param::constant(cout, 0.0)), input: None }
    }

    fn pad_left(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// Rows of `x` zero-padded so that tap `k` of output `t` reads index `t + k`.
    fn padded_rows(&self, rows: &[S], w: usize, left: usize) -> Vec<S> {
        let pw = w + self.kernel - 1;
        let mut out = vec![S::zero(); rows.len() / w * pw];
        for (src, dst) in rows.chunks(w).zip(out.chunks_mut(pw)) {
            dst[left..left + w].copy_from_slice(src);
        }
        out
    }

    fn compute(&self, x: &Tensor<S>) -> Tensor<S> {
        let [b, c, h, w] = x.shape;
        assert_eq!(c, self.cin, "conv input planes");
        let (gin, gout, hw) = (self.cin / self.groups, self.cout / self.groups, h * w);
        let (k, pw) = (self.kernel, w + self.kernel - 1);
        let mut y = Tensor::zeros([b, self.cout, h, w]);
        for bi in 0..b {
            let xp = self.padded_rows(x.item(bi), w, self.pad_left());
            let out = &mut y.data[bi * self.cout * hw..(bi + 1) * self.cout * hw];
            for co in 0..self.cout {
                let g = co / gout;
                let bias = self.bias.as_ref().map_or(S::zero(), |p| p.value[co]);
                for r in 0..h {
                    let orow = &mut out[(co * h + r) * w..(co * h + r + 1) * w];
                    orow.iter_mut().for_each(|v| *v = bias);
                    for cig in 0..gin {
                        let ci = g * gin + cig;
                        let wk = &self.weight.value[(co * gin + cig) * k..(co * gin + cig + 1) * k];
                        correlate(wk, &xp[(ci * h + r) * pw..(ci * h + r + 1) * pw], orow);
                    }
                }
            }
        }
        y
    }
}

/// `out[t] += Σ_k w[k]·x[t + k]`, with `x.len() == out.len() + w.len() - 1`.
fn correlate<S: Scalar>(w: &[S], x: &[S], out: &mut [S]) {
    assert_eq!(x.len() + 1, out.len() + w.len(), "correlation operand lengths");
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { correlate_fma(w, x, out) };
        return;
    }
    correlate_kernel::<S, false>(w, x, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn correlate_fma<S: Scalar>(w: &[S], x: &[S], out: &mut [S]) {
    correlate_kernel::<S, true>(w, x, out)
}

#[inline(always)]
fn correlate_kernel<S: Scalar, const FMA: bool>(w: &[S], x: &[S], out: &mut [S]) {
    const L: usize = 64;
    let n = out.len();
    let full = n / L * L;
    for t0 in (0..full).step_by(L) {
        let mut acc: [S; L] = out[t0..t0 + L].try_into().expect("block");
        for (k, &wk) in w.iter().enumerate() {
            let xs: &[S; L] = x[t0 + k..t0 + k + L].try_into().expect("block");
            for j in 0..L {
                acc[j] = if FMA { wk.mul_add(xs[j], acc[j]) } else { acc[j] + wk * xs[j] };
            }
        }
        out[t0..t0 + L].copy_from_slice(&acc);
    }
    for t in full..n {
        out[t] = out[t] + dot(w, &x[t..t + w.len()]);
    }
}

/// `y += a·x`.
#[inline]
fn axpy<S: Scalar>(a: S, x: &[S], y: &mut [S]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv = *yv + a * *xv;
    }
}

/// Sum with independent partial sums so the loop vectorises.
#[inline]
fn lane_sum<S: Scalar>(x: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let chunks = x.chunks_exact(8);
    let tail: S = chunks.remainder().iter().copied().sum();
    for c in chunks {
        for j in 0..8 {
            acc[j] = acc[j] + c[j];
        }
    }
    acc.iter().copied().sum::<S>() + tail
}

/// Dot product with independent partial sums so the loop vectorises.
#[inline]
fn dot<S: Scalar>(x: &[S], y: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let tail: S = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| *a * *b).sum();
    for (a, b) in xc.zip(yc) {
        for j in 0..8 {
            acc[j] = acc[j] + a[j] * b[j];
        }
    }
    acc.iter().copied().sum::<S>() + tail
}

impl<S: Scalar> Layer<S> for Conv1d<S> {
    fn forward(&mut self, x: Tensor<S>, _: &mut Stream) -> Tensor<S> {
        let y = self.compute(&x);
        self.input = Some(x);
        y
    }

    fn backward(&mut self, dy: Tensor<S>) -> Tensor<S> {
        let x = take(&mut self.input);
        let [b, _, h, w] = x.shape;
        let (gin, gout, hw) = (self.cin / self.groups, self.cout / self.groups, h * w);
        let (k, pw) = (self.kernel, w + self.kernel - 1);
        let flipped: Vec<S> = self.weight.value.chunks(k).flat_map(|c| c.iter().rev().copied()).collect();
        let mut dx = Tensor::zeros(x.shape);
        for bi in 0..b {
            let xp = self.padded_rows(x.item(bi), w, self.pad_left());
            let dyi = &dy.data[bi * self.cout * hw..(bi + 1) * self.cout * hw];
            let dyp = self.padded_rows(dyi, w, k - 1 - self.pad_left());
            let dxi = &mut dx.data[bi * self.cin * hw..(bi + 1) * self.cin * hw];
            for co in 0..self.cout {
                let g = co / gout;
                for r in 0..h {
                    let drow = &dyi[(co * h + r) * w..(co * h + r + 1) * w];
                    let dprow = &dyp[(co * h + r) * pw..(co * h + r + 1) * pw];
                    if let Some(bias) = &mut self.bias {
                        bias.grad[co] = bias.grad[co] + drow.iter().copied().sum();
                    }
                    for cig in 0..gin {
                        let ci = g * gin + cig;
                        let base = (co * gin + cig) * k;
                        correlate(drow, &xp[(ci * h + r) * pw..(ci * h + r + 1) * pw], &mut self.weight.grad[base..base + k]);
                        correlate(&flipped[base..base + k], dprow, &mut dxi[(ci * h + r) * w..(ci * h + r + 1) * w]);
                    }
                }
            }
        }
        dx
    }

    fn infer(&self, x: Tensor<S>) -> Tensor<S> {
        self.compute(&x)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut p = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            p.push(b);
        }
        p
    }

    fn state(&self) -> Vec<(&'static str, &Vec<S>)> {
        let mut s = vec![("weight", &self.weight.value)];
        if let Some(b) = &self.bias {
            s.push(("bias", &b.value));
        }
        s
    }

    fn state_mut(&mut self) -> Vec<(&'static str, &mut Vec<S>)> {
        let mut s = vec![("weight", &mut self.weight.value)];
        if let Some(b) = &mut self.bias {
            s.push(("bias", &mut b.value));
        }
        s
    }

    fn n_trainable(&self) -> usize {
        self.weight.value.len() + self.bias.as_ref().map_or(0, |b| b.value.len())
    }
}

/// Depthwise spatial convolution: `[B, P, C, T]` to `[B, P·D, 1, T]`, each
/// output plane a weighted sum over the C rows of its source plane.
pub struct SpatialConv<S> {
    pub planes: usize,
    pub depth: usize,
    pub rows: usize,
    /// `[P·D, C]`.
    pub weight: Param<S>,
    input: Option<Tensor<S>>,
}

impl<S: Scalar> SpatialConv<S> {
    pub fn new(planes: usize, depth: usize, rows: usize, rng: &mut Stream) -> Self {
        let weight = Param::glorot(planes * depth * rows, rows, depth, rng);
        SpatialConv { planes, depth, rows, weight, input: None }
    }

    fn compute(&self, x: &Tensor<S>) -> Tensor<S> {
        let [b, p, c, t] = x.shape;
        assert!(p == self.planes && c == self.rows, "spatial conv input shape {:?}", x.shape);
        let d = self.depth;
        let mut y = Tensor::zeros([b, p * d, 1, t]);
        for (item, out) in x.data.chunks(p * c * t).zip(y.data.chunks_mut(p * d * t)) {
            for (o, orow) in out.chunks_mut(t).enumerate() {
                let src = &item[(o / d) * c * t..(o / d + 1) * c * t];
                for (ch, xrow) in src.chunks(t).enumerate() {
                    axpy(self.weight.value[o * c + ch], xrow, orow);
                }
            }
        }
        y
    }
}

impl<S: Scalar> Layer<S> for SpatialConv<S> {
    fn forward(&mut self, x: Tensor<S>, _: &mut Stream) -> Tensor<S> {
        let y = self.compute(&x);
        self.input = Some(x);
        y
    }

    fn backward(&mut self, dy: Tensor<S>) -> Tensor<S> {
        let x = take(&mut self.input);
        let [_, p, c, t] = x.shape;
        let d = self.depth;
        let mut dx = Tensor::zeros(x.shape);
        for ((item, ditem), dyi) in x.data.chunks(p * c * t).zip(dx.data.chunks_mut(p * c * t)).zip(dy.data.chunks(p * d * t)) {
            for (o, drow) in dyi.chunks(t).enumerate() {
                let base = (o / d) * c * t;
                for ch in 0..c {
                    let xrow = &item[base + ch * t..base + (ch + 1) * t];
                    self.weight.grad[o * c + ch] = self.weight.grad[o * c + ch] + dot(drow, xrow);
                    axpy(self.weight.value[o * c + ch], drow, &mut ditem[base + ch * t..base + (ch + 1) * t]);
                }
            }
        }
        dx
    }

    fn infer(&self, x: Tensor<S>) -> Tensor<S> {
        self.compute(&x)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.weight]
    }

    fn state(&self) -> Vec<(&'static str, &Vec<S>)> {
        vec![("weight", &self.weight.value)]
    }

    fn state_mut(&mut self) -> Vec<(&'static str, &mut Vec<S>)> {
        vec![("weight", &mut self.weight.value)]
    }

    fn n_trainable(&self) -> usize {
        self.weight.value.len()
    }
}

/// Transpose of [`SpatialConv`]: `[B, P·D, 1, T]` back to `[B, P, C, T]`.
pub struct SpatialDeconv<S> {
    pub planes: usize,
    pub depth: usize,
    pub rows: usize,
    /// `[P·D, C]`.
    pub weight: Param<S>,
    input: Option<Tensor<S>>,
}

impl<S: Scalar> SpatialDeconv<S> {
    pub fn new(planes: usize, depth: usize, rows: usize, rng: &mut Stream) -> Self {
        let weight = Param::glorot(planes * depth * rows, depth, rows, rng);
        SpatialDeconv { planes, depth, rows, weight, input: None }
    }

    fn compute(&self, x: &Tensor<S>) -> Tensor<S> {
        let [b, pd, h, t] = x.shape;
        let (p, d, c) = (self.planes, self.depth, self.rows);
        assert!(pd == p * d && h == 1, "spatial deconv input shape {:?}", x.shape);
        let mut y = Tensor::zeros([b, p, c, t]);
        for (item, out) in x.data.chunks(pd * t).zip(y.data.chunks_mut(p * c * t)) {
            for (o, xrow) in item.chunks(t).enumerate() {
                let base = (o / d) * c * t;
                for ch in 0..c {
                    axpy(self.weight.value[o * c + ch], xrow, &mut out[base + ch * t..base + (ch + 1) * t]);
                }
            }
        }
        y
    }
}

impl<S: Scalar> Layer<S> for SpatialDeconv<S> {
    fn forward(&mut self, x: Tensor<S>, _: &mut Stream) -> Tensor<S> {
        let y = self.compute(&x);
        self.input = Some(x);
        y
    }

    fn backward(&mut self, dy: Tensor<S>) -> Tensor<S> {
        let x = take(&mut self.input);
        let [_, pd, _, t] = x.shape;
        let (p, d, c) = (self.planes, self.depth, self.rows);
        let mut dx = Tensor::zeros(x.shape);
        for ((item, ditem), dyi) in x.data.chunks(pd * t).zip(dx.data.chunks_mut(pd * t)).zip(dy.data.chunks(p * c * t)) {
            for (o, (xrow, dxrow)) in item.chunks(t).zip(ditem.chunks_mut(t)).enumerate() {
                let base = (o / d) * c * t;
                for ch in 0..c {
                    let drow = &dyi[base + ch * t..base + (ch + 1) * t];
                    self.weight.grad[o * c + ch] = self.weight.grad[o * c + ch] + dot(drow, xrow);
                    axpy(self.weight.value[o * c + ch], drow, dxrow);
                }
            }
        }
        dx
    }

    fn infer(&self, x: Tensor<S>) -> Tensor<S> {
        self.compute(&x)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.weight]
    }

    fn state(&self) -> Vec<(&'static str, &Vec<S>)> {
        vec![("weight", &self.weight.value)]
    }

    fn state_mut(&mut self) -> Vec<(&'static str, &mut Vec<S>)> {
        vec![("weight", &mut self.weight.value)]
    }

    fn n_trainable(&self) -> usize {
        self.weight.value.len()
    }
}

/// Batch normalisation over planes, statistics pooled across batch, rows and time.
pub struct BatchNorm<S> {
    pub planes: usize,
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<(Vec<S>, Vec<S>, [usize; 4])>,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(planes: usize) -> Self {
        BatchNorm {
            planes,
            gamma: Param::constant(planes, 1.0),
            beta: Param::constant(planes, 0.0),
            running_mean: vec![S::zero(); planes],
            running_var: vec![S::one(); planes],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn plane_iter(shape: [usize; 4], p: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
        let [b, c, h, w] = shape;
        let hw = h * w;
        (0..b).map(move |bi| (bi * c + p) * hw..(bi * c + p + 1) * hw)
    }
}

impl<S: Scalar> Layer<S> for BatchNorm<S> {
    fn forward(&mut self, x: Tensor<S>, _: &mut Stream) -> Tensor<S> {
        let shape = x.shape;
        assert_eq!(shape[1], self.planes, "batch norm planes");
        let n = (shape[0] * shape[2] * shape[3]) as f64;
        let mut xhat = x;
        let mut y = Tensor::zeros(shape);
        let mut inv_std = vec![S::zero(); self.planes];
        for (p, inv) in inv_std.iter_mut().enumerate() {
            let mean = Self::plane_iter(shape, p).map(|r| lane_sum(&xhat.data[r]).as_f64()).sum::<f64>() / n;
            let ms = S::of(mean);
            let ss = Self::plane_iter(shape, p)
                .map(|r| xhat.data[r].iter().map(|v| (*v - ms) * (*v - ms)).fold(S::zero(), |a, b| a + b).as_f64())
                .sum::<f64>();
            let var = ss / n;
            let unbiased = if n > 1.0 { ss / (n - 1.0) } else { var };
            let m = self.momentum;
            self.running_mean[p] = S::of((1.0 - m) * self.running_mean[p].as_f64() + m * mean);
            self.running_var[p] = S::of((1.0 - m) * self.running_var[p].as_f64() + m * unbiased);
            let is = S::of(1.0 / (var + self.eps).sqrt());
            *inv = is;
            let (g, bt) = (self.gamma.value[p], self.beta.value[p]);
            for r in Self::plane_iter(shape, p) {
                for (xv, yv) in xhat.data[r.clone()].iter_mut().zip(&mut y.data[r]) {
                    *xv = (*xv - ms) * is;
                    *yv = *xv * g + bt;
                }
            }
        }
        self.cache = Some((xhat.data, inv_std, shape));
        y
    }

    fn backward(&mut self, mut dy: Tensor<S>) -> Tensor<S> {
        let (xhat, inv_std, shape) = take(&mut self.cache);
        let n = S::of((shape[0] * shape[2] * shape[3]) as f64);
        for p in 0..self.planes {
            let (mut sdy, mut sdyx) = (S::zero(), S::zero());
            for r in Self::plane_iter(shape, p) {
                for (d, xh) in dy.data[r.clone()].iter().zip(&xhat[r]) {
                    sdy = sdy + *d;
                    sdyx = sdyx + *d * *xh;
                }
            }
            self.beta.grad[p] = self.beta.grad[p] + sdy;
            self.gamma.grad[p] = self.gamma.grad[p] + sdyx;
            let k = self.gamma.value[p] * inv_std[p] / n;
            for r in Self::plane_iter(shape, p) {
                for (d, xh) in dy.data[r.clone()].iter_mut().zip(&xhat[r]) {
                    *d = k * (n * *d - sdy - *xh * sdyx);
                }
            }
        }
        dy
    }

    fn infer(&self, mut x: Tensor<S>) -> Tensor<S> {
        let shape = x.shape;
        for p in 0..self.planes {
            let is = S::one() / (self.running_var[p] + S::of(self.eps)).sqrt();
            let (scale, mean, bt) = (self.gamma.value[p] * is, self.running_mean[p], self.beta.value[p]);
            for r in Self::plane_iter(shape, p) {
                x.data[r].iter_mut().for_each(|v| *v = (*v - mean) * scale + bt);
            }
        }
        x
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn state(&self) -> Vec<(&'static str, &Vec<S>)> {
        vec![
            ("gamma", &self.gamma.value),
            ("beta", &self.beta.value),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ]
    }

    fn state_mut(&mut self) -> Vec<(&'static str, &mut Vec<S>)> {
        vec![
            ("gamma", &mut self.gamma.value),
            ("beta", &mut self.beta.value),
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
        ]
    }

    fn n_trainable(&self) -> usize {
        2 * self.planes
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    /// Leaky rectifier with the given negative slope; 0 gives a plain ReLU.
    Leaky(f64),
    Elu,
}

pub struct Act<S> {
    pub kind: Activation,
    input: Option<Tensor<S>>,
}

impl<S: Scalar> Act<S> {
    pub fn new(kind: Activation) -> Self {
        Act { kind, input: None }
    }
}

impl<S: Scalar> Layer<S> for Act<S> {
    fn forward(&mut self, x: Tensor<S>, _: &mut Stream) -> Tensor<S> {
        let y = self.infer(x.clone());
        self.input = Some(x);
        y
    }

    fn backward(&mut self, mut dy: Tensor<S>) -> Tensor<S> {
        let x = take(&mut self.input);
        let zero = S::zero();
        match self.kind {
            Activation::Leaky(a) => {
                let a = S::of(a);
                dy.data.iter_mut().zip(&x.data).for_each(|(d, v)| *d = if *v > zero { *d } else { *d * a });
            }
            Activation::Elu => {
                dy.data.iter_mut().zip(&x.data).for_each(|(d, v)| *d = if *v > zero { *d } else { *d * v.exp() });
            }
        }
        dy
    }

    fn infer(&self, x: Tensor<S>) -> Tensor<S> {
        let zero = S::zero();
        match self.kind {
            Activation::Leaky(a) => {
                let a = S::of(a);
                x.map(|v| if v > zero { v } else { v * a })
            }
            Activation::Elu => x.map(|v| if v > zero { v } else { v.exp_m1() }),
        }
    }
}

/// Non-overlapping average pooling along width; trailing samples are dropped.
pub struct AvgPool<S> {
    pub size: usize,
    in_shape: Option<[usize; 4]>,
    _s: std::marker::PhantomData<S>,
}

impl<S: Scalar> AvgPool<S> {
    pub fn new(size: usize) -> Self {
        assert!(size >= 1);
        AvgPool { size, in_shape: None, _s: Default::default() }
    }
}

impl<S: Scalar> Layer<S> for AvgPool<S> {
    fn forward(&mut self, x: Tensor<S>, _: &mut Stream) -> Tensor<S> {
        self.in_shape = Some(x.shape);
        self.infer(x)
    }

    fn backward(&mut self, dy: Tensor<S>) -> Tensor<S> {
        let shape = take(&mut self.in_shape);
        let (w, wo, k) = (shape[3], dy.shape[3], self.size);
        let scale = S::one() / S::of(k as f64);
        let mut dx = Tensor::zeros(shape);
        for (row_in, row_out) in dx.data.chunks_mut(w).zip(dy.data.chunks(wo)) {
            for (j, d) in row_out.iter().enumerate() {
                row_in[j * k..(j + 1) * k].iter_mut().for_each(|v| *v = *d * scale);
            }
        }
        dx
    }

    fn infer(&self, x: Tensor<S>) -> Tensor<S> {
        let [b, c, h, w] = x.shape;
        let (k, wo) = (self.size, w / self.size);
        let scale = S::one() / S::of(k as f64);
        let mut y = Tensor::zeros([b, c, h, wo]);
        for (row_in, row_out) in x.data.chunks(w).zip(y.data.chunks_mut(wo.max(1))) {
            for (j, o) in row_out.iter_mut().enumerate().take(wo) {
                *o = row_in[j * k..(j + 1) * k].iter().copied().sum::<S>() * scale;
            }
        }
        y
    }
}

/// Nearest-neighbour upsampling along width to an exact target length.
pub struct Upsample<S> {
    pub factor: usize,
    pub target: usize,
    in_shape: Option<[usize; 4]>,
    _s: std::marker::PhantomData<S>,
}

impl<S: Scalar> Upsample<S> {
    pub fn new(factor: usize, target: usize) -> Self {
        Upsample { factor, target, in_shape: None, _s: Default::default() }
    }

    fn source(&self, t: usize, w: usize) -> usize {
        (t / self.factor).min(w - 1)
    }
}

impl<S: Scalar> Layer<S> for Upsample<S> {
    fn forward(&mut self, x: Tensor<S>, _: &mut Stream) -> Tensor<S> {
        self.in_shape = Some(x.shape);
        self.infer(x)
    }

    fn backward(&mut self, dy: Tensor<S>) -> Tensor<S> {
        let shape = take(&mut self.in_shape);
        let w = shape[3];
        let mut dx = Tensor::zeros(shape);
        for (row_in, row_out) in dx.data.chunks_mut(w).zip(dy.data.chunks(self.target)) {
            for (t, d) in row_out.iter().enumerate() {
                let s = self.source(t, w);
                row_in[s] = row_in[s] + *d;
            }
        }
        dx
    }

    fn infer(&self, x: Tensor<S>) -> Tensor<S> {
        let [b, c, h, w] = x.shape;
        let mut y = Tensor::zeros([b, c, h, self.target]);
        for (row_in, row_out) in x.data.chunks(w).zip(y.data.chunks_mut(self.target)) {
            for (t, o) in row_out.iter_mut().enumerate() {
                *o = row_in[self.source(t, w)];
            }
        }
        y
    }
}

/// Fully connected layer on flattened items: `[B, …]` to `[B, 1, 1, out]`.
pub struct Dense<S> {
    pub n_in: usize,
    pub n_out: usize,
    /// `[out, in]`.
    pub weight: Param<S>,
    pub bias: Param<S>,
    input: Option<Tensor<S>>,
}

impl<S: Scalar> Dense<S> {
    pub fn new(n_in: usize, n_out: usize, rng: &mut Stream) -> Self {
        Dense {
            n_in,
            n_out,
            weight: Param::glorot(n_in * n_out, n_in, n_out, rng),
            bias: Param::constant(n_out, 0.0),
            input: None,
        }
    }

    fn compute(&self, x: &Tensor<S>) -> Tensor<S> {
        let b = x.batch();
        assert_eq!(x.item_len(), self.n_in, "dense input width");
        let mut y = Tensor::zeros([b, 1, 1, self.n_out]);
        for row in y.data.chunks_mut(self.n_out) {
            row.copy_from_slice(&self.bias.value);
        }
        matmul(b, self.n_in, self.n_out, &x.data, false, &self.weight.value, true, &mut y.data, true);
        y
    }
}

impl<S: Scalar> Layer<S> for Dense<S> {
    fn forward(&mut self, x: Tensor<S>, _: &mut Stream) -> Tensor<S> {
        let y = self.compute(&x);
        self.input = Some(x);
        y
    }

    fn backward(&mut self, dy: Tensor<S>) -> Tensor<S> {
        let x = take(&mut self.input);
        let b = x.batch();
        matmul(self.n_out, b, self.n_in, &dy.data, true, &x.data, false, &mut self.weight.grad, true);
        for row in dy.data.chunks(self.n_out) {
            self.bias.grad.iter_mut().zip(row).for_each(|(g, d)| *g = *g + *d);
        }
        let mut dx = Tensor::zeros(x.shape);
        matmul(b, self.n_out, self.n_in, &dy.data, false, &self.weight.value, false, &mut dx.data, false);
        dx
    }

    fn infer(&self, x: Tensor<S>) -> Tensor<S> {
        self.compute(&x)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn state(&self) -> Vec<(&'static str, &Vec<S>)> {
        vec![("weight", &self.weight.value), ("bias", &self.bias.value)]
    }

    fn state_mut(&mut self) -> Vec<(&'static str, &mut Vec<S>)> {
        vec![("weight", &mut self.weight.value), ("bias", &mut self.bias.value)]
    }

    fn n_trainable(&self) -> usize {
        self.weight.value.len() + self.bias.value.len()
    }
}

/// Inverted dropout; identity at inference.
pub struct Dropout<S> {
    pub rate: f64,
    mask: Option<Vec<S>>,
}

impl<S: Scalar> Dropout<S> {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0, 1)");
        Dropout { rate, mask: None }
    }
}

impl<S: Scalar> Layer<S> for Dropout<S> {
    fn forward(&mut self, mut x: Tensor<S>, rng: &mut Stream) -> Tensor<S> {
        let keep = S::of(1.0 / (1.0 - self.rate));
        let mask: Vec<S> = (0..x.data.len())
            .map(|_| if rng.random::<f64>() < self.rate { S::zero() } else { keep })
            .collect();
        x.data.iter_mut().zip(&mask).for_each(|(v, m)| *v = *v * *m);
        self.mask = Some(mask);
        x
    }

    fn backward(&mut self, mut dy: Tensor<S>) -> Tensor<S> {
        let mask = take(&mut self.mask);
        dy.data.iter_mut().zip(&mask).for_each(|(d, m)| *d = *d * *m);
        dy
    }

    fn infer(&self, x: Tensor<S>) -> Tensor<S> {
        x
    }
}

/// Reshape between the 4-D layouts of neighbouring layers.
pub struct Reshape<S> {
    pub item: [usize; 3],
    in_shape: Option<[usize; 4]>,
    _s: std::marker::PhantomData<S>,
}

impl<S: Scalar> Reshape<S> {
    pub fn new(item: [usize; 3]) -> Self {
        Reshape { item, in_shape: None, _s: Default::default() }
    }
}

impl<S: Scalar> Layer<S> for Reshape<S> {
    fn forward(&mut self, x: Tensor<S>, _: &mut Stream) -> Tensor<S> {
        self.in_shape = Some(x.shape);
        self.infer(x)
    }

    fn backward(&mut self, dy: Tensor<S>) -> Tensor<S> {
        let shape = take(&mut self.in_shape);
        dy.reshape(shape)
    }

    fn infer(&self, x: Tensor<S>) -> Tensor<S> {
        let b = x.batch();
        x.reshape([b, self.item[0], self.item[1], self.item[2]])
    }
}

/// Ordered stack of layers.
pub struct Sequential<S: Scalar> {
    pub layers: Vec<Box<dyn Layer<S>>>,
}

impl<S: Scalar> Sequential<S> {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    pub fn push(mut self, layer: impl Layer<S> + 'static) -> Self {
        self.layers.push(Box::new(layer));
        self
    }

    pub fn forward(&mut self, x: Tensor<S>, rng: &mut Stream) -> Tensor<S> {
        self.layers.iter_mut().fold(x, |x, l| l.forward(x, rng))
    }

    pub fn backward(&mut self, dy: Tensor<S>) -> Tensor<S> {
        self.layers.iter_mut().rev().fold(dy, |d, l| l.backward(d))
    }

    pub fn infer(&self, x: Tensor<S>) -> Tensor<S> {
        self.layers.iter().fold(x, |x, l| l.infer(x))
    }

    /// Inference through the first `n` layers only.
    pub fn infer_prefix(&self, x: Tensor<S>, n: usize) -> Tensor<S> {
        self.layers.iter().take(n).fold(x, |x, l| l.infer(x))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn n_trainable(&self) -> usize {
        self.layers.iter().map(|l| l.n_trainable()).sum()
    }

    pub fn state(&self, prefix: &str) -> Vec<(String, &Vec<S>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.state().into_iter().map(move |(n, v)| (format!("{prefix}.{i}.{n}"), v)))
            .collect()
    }

    pub fn state_mut(&mut self, prefix: &str) -> Vec<(String, &mut Vec<S>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.state_mut().into_iter().map(move |(n, v)| (format!("{prefix}.{i}.{n}"), v)))
            .collect()
    }
}
