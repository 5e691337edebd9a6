//! Central finite-difference gradient checking.

/// Relative error with an absolute floor so that vanishing gradients are
/// compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` around `x[i]` with step `h`, restoring `x[i]`.
pub fn central_difference(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let mut x = vec![2.0, 0.5];
        let d = central_difference(&mut x, 0, 1e-5, |v| v[0].powi(3) + v[1]);
        assert!(relative_error(12.0, d) < 1e-8);
        assert_eq!(x, vec![2.0, 0.5]);
    }
}

use eegvae_core::rng::named_stream;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;
use crate::vae::{VaeConfig, VaeNet, VaeShape};

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compares backprop gradients of the full VAE objective against central
/// differences on `n_probes` randomly chosen parameters of a small
/// double-precision model (`[channels × times]` input).
pub fn vae_gradient_check(channels: usize, times: usize, cfg: &VaeConfig, n_probes: usize, seed: u64) -> crate::Result<Vec<Probe>> {
    let kernel = crate::vae::temporal_kernel(128.0).min(times);
    let shape = VaeShape::new(channels, times, kernel, cfg)?;
    let mut net = VaeNet::<f64>::new(shape, &mut named_stream(seed, "gradcheck/init"));
    let mut rng = named_stream(seed, "gradcheck/data");
    let batch = 3;
    let x = Tensor::from_vec(
        [batch, 1, channels, times],
        (0..batch * channels * times).map(|_| StandardNormal.sample(&mut rng)).collect(),
    );
    let eps: Vec<f64> = (0..batch * cfg.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();

    let pass = net.forward(x.clone(), &eps, &mut rng)?;
    net.backward(&x, &pass, cfg.beta);
    let grads: Vec<Vec<f64>> = net.params_mut().iter().map(|p| p.grad.clone()).collect();
    let names: Vec<String> = net.state().into_iter().map(|(n, _)| n).filter(|n| !n.contains("running")).collect();
    let total: usize = grads.iter().map(Vec::len).sum();

    let mut probes = Vec::with_capacity(n_probes);
    let h = 1e-6;
    while probes.len() < n_probes {
        let mut flat = rng.random_range(0..total);
        let mut t = 0;
        while flat >= grads[t].len() {
            flat -= grads[t].len();
            t += 1;
        }
        let orig = net.params_mut()[t].value[flat];
        net.params_mut()[t].value[flat] = orig + h;
        let up = net.loss(&x, &eps, cfg.beta)?.total;
        net.params_mut()[t].value[flat] = orig - h;
        let down = net.loss(&x, &eps, cfg.beta)?.total;
        net.params_mut()[t].value[flat] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[t][flat];
        probes.push(Probe {
            tensor: names.get(t).cloned().unwrap_or_default(),
            index: flat,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(probes)
}
