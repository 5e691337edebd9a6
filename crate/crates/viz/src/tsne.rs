//! Exact t-SNE.
//!
//! Rows are processed in canonical `(subject, epoch)` order and each row's
//! starting point is drawn from a stream named after its provenance, so the
//! embedding of a row does not depend on where it sits in the input.

use eegvae_core::rng::named_stream;
use eegvae_core::{FeatureMatrix, RowMeta};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub n_iter: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig { perplexity: 30.0, n_iter: 1000, early_exaggeration: 12.0, exaggeration_iters: 250, learning_rate: 200.0, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlPoint {
    pub iteration: usize,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    pub coords: Vec<[f64; 2]>,
    pub rows: Vec<RowMeta>,
    pub params: TsneConfig,
    /// KL divergence (without exaggeration) every 50 iterations, at the end
    /// of early exaggeration and at the final iteration.
    pub kl_trace: Vec<KlPoint>,
}

impl Embedding2D {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn final_kl(&self) -> Option<f64> {
        self.kl_trace.last().map(|p| p.kl)
    }

    /// KL value recorded at the last exaggerated iteration.
    pub fn kl_after_exaggeration(&self) -> Option<f64> {
        let it = self.params.exaggeration_iters.checked_sub(1)?;
        self.kl_trace.iter().find(|p| p.iteration == it).map(|p| p.kl)
    }
}

fn squared_distances(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let xi = &x[i * d..(i + 1) * d];
        for (j, v) in row.iter_mut().enumerate() {
            *v = xi.iter().zip(&x[j * d..(j + 1) * d]).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    });
    out
}

/// Conditional affinities of one row, bisecting the Gaussian precision until
/// the entropy matches `ln(perplexity)`.
fn row_affinities(dist: &[f64], i: usize, perplexity: f64, out: &mut [f64]) {
    let target = perplexity.ln();
    let (mut beta, mut lo, mut hi) = (1.0f64, f64::NEG_INFINITY, f64::INFINITY);
    // Shifting by the nearest neighbour keeps exp() away from underflow.
    let min_d = dist.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
    for _ in 0..200 {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for (j, (&dj, o)) in dist.iter().zip(out.iter_mut()).enumerate() {
            *o = if j == i { 0.0 } else { (-(dj - min_d) * beta).exp() };
            sum += *o;
            weighted += (dj - min_d) * *o;
        }
        let entropy = sum.ln() + beta * weighted / sum;
        let diff = entropy - target;
        if diff.abs() < 1e-5 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
        }
    }
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
}

fn joint_affinities(x: &[f64], n: usize, d: usize, perplexity: f64) -> Vec<f64> {
    let dist = squared_distances(x, n, d);
    let mut cond = vec![0.0; n * n];
    cond.par_chunks_mut(n).enumerate().for_each(|(i, row)| row_affinities(&dist[i * n..(i + 1) * n], i, perplexity, row));
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    p
}

/// Student-t kernel values and their sum over off-diagonal pairs.
fn low_dim_kernel(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    num.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            if j != i {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                *v = 1.0 / (1.0 + dx * dx + dy * dy);
            }
        }
    });
    let sum = num.iter().sum();
    (num, sum)
}

fn kl_divergence(p: &[f64], num: &[f64], sum: f64, n: usize) -> f64 {
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let pij = p[i * n + j];
                let qij = (num[i * n + j] / sum).max(1e-12);
                kl += pij * (pij / qij).ln();
            }
        }
    }
    kl
}

fn canonical_order(rows: &[RowMeta]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| (&rows[a].subject_id, rows[a].epoch_index).cmp(&(&rows[b].subject_id, rows[b].epoch_index)));
    order
}

/// Projects feature rows into the plane by minimizing the KL divergence
/// between high- and low-dimensional joint neighbour distributions.
pub fn tsne_project(features: &FeatureMatrix, cfg: &TsneConfig) -> Result<Embedding2D> {
    let n = features.n_rows();
    let d = features.dim;
    if n == 0 {
        return Err(Error::Empty("feature matrix".into()));
    }
    if !(cfg.perplexity > 0.0) || (n as f64) <= 3.0 * cfg.perplexity {
        return Err(Error::Perplexity { perplexity: cfg.perplexity, n });
    }
    if !(cfg.learning_rate > 0.0) || !(cfg.early_exaggeration >= 1.0) {
        return Err(Error::InvalidConfig("learning rate must be positive and exaggeration at least 1".into()));
    }
    if features.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature matrix".into()));
    }

    let order = canonical_order(&features.rows);
    let x: Vec<f64> = order.iter().flat_map(|&i| features.row(i).iter().map(|&v| v as f64)).collect();
    let p = joint_affinities(&x, n, d, cfg.perplexity);

    let init = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = order
        .iter()
        .map(|&i| {
            let r = &features.rows[i];
            let mut rng = named_stream(cfg.seed, &format!("tsne/init/{}/{}", r.subject_id, r.epoch_index));
            [init.sample(&mut rng), init.sample(&mut rng)]
        })
        .collect();
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_trace = Vec::new();

    for it in 0..cfg.n_iter {
        let exaggerating = it < cfg.exaggeration_iters;
        let exag = if exaggerating { cfg.early_exaggeration } else { 1.0 };
        let momentum = if exaggerating { 0.5 } else { 0.8 };
        let (num, sum) = low_dim_kernel(&y);

        let grad: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    if j != i {
                        let w = (exag * p[i * n + j] - num[i * n + j] / sum) * num[i * n + j];
                        g[0] += w * (y[i][0] - y[j][0]);
                        g[1] += w * (y[i][1] - y[j][1]);
                    }
                }
                [4.0 * g[0], 4.0 * g[1]]
            })
            .collect();

        for i in 0..n {
            for k in 0..2 {
                let same_sign = (grad[i][k] > 0.0) == (update[i][k] > 0.0);
                gains[i][k] = if same_sign { gains[i][k] * 0.8 } else { gains[i][k] + 0.2 }.max(0.01);
                update[i][k] = momentum * update[i][k] - cfg.learning_rate * gains[i][k] * grad[i][k];
                y[i][k] += update[i][k];
            }
        }
        let mean = y.iter().fold([0.0; 2], |acc, v| [acc[0] + v[0], acc[1] + v[1]]);
        for v in y.iter_mut() {
            v[0] -= mean[0] / n as f64;
            v[1] -= mean[1] / n as f64;
        }

        let record = it % 50 == 49 || it + 1 == cfg.exaggeration_iters || it + 1 == cfg.n_iter;
        if record {
            let (num, sum) = low_dim_kernel(&y);
            let kl = kl_divergence(&p, &num, sum, n);
            if !kl.is_finite() || y.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
                return Err(Error::NonFinite(format!("t-SNE objective at iteration {it}")));
            }
            kl_trace.push(KlPoint { iteration: it, kl });
        }
    }

    let mut coords = vec![[0.0; 2]; n];
    for (k, &i) in order.iter().enumerate() {
        coords[i] = y[k];
    }
    Ok(Embedding2D { coords, rows: features.rows.clone(), params: cfg.clone(), kl_trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affinities_hit_target_perplexity() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin() * 3.0 + i as f64 * 0.1).collect();
        let dist = squared_distances(&x, 40, 1);
        let mut row = vec![0.0; 40];
        row_affinities(&dist[..40], 0, 10.0, &mut row);
        let h: f64 = -row.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
        assert!((h.exp() - 10.0).abs() < 1e-3, "perplexity {}", h.exp());
        assert_eq!(row[0], 0.0);
    }

    #[test]
    fn joint_affinities_are_symmetric_and_normalized() {
        let x: Vec<f64> = (0..60).map(|i| (i as f64).sqrt()).collect();
        let p = joint_affinities(&x, 20, 3, 5.0);
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        for i in 0..20 {
            for j in 0..20 {
                assert_eq!(p[i * 20 + j], p[j * 20 + i]);
            }
        }
    }
}
