use serde::{Deserialize, Serialize};

use crate::layers::Param;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam optimiser; moment buffers follow the order of the parameter list.
pub struct Adam<S> {
    pub config: AdamConfig,
    step: i32,
    moments: Vec<(Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, moments: Vec::new() }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, params: Vec<&mut Param<S>>) {
        if self.moments.is_empty() {
            self.moments = params.iter().map(|p| (vec![S::zero(); p.value.len()], vec![S::zero(); p.value.len()])).collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter list changed between steps");
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        let lr = S::of(c.learning_rate * bc2.sqrt() / bc1);
        let eps = S::of(c.eps * bc2.sqrt());
        for (p, (m, v)) in params.into_iter().zip(&mut self.moments) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (S::one() - b1) * g;
                v[i] = b2 * v[i] + (S::one() - b2) * g * g;
                p.value[i] = p.value[i] - lr * m[i] / (v[i].sqrt() + eps);
            }
            p.zero_grad();
        }
    }
}
