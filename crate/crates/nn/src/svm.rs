//! RBF-kernel support vector classifier trained by sequential minimal
//! optimisation, with Platt-scaled probabilities.

use eegvae_core::Label;
use serde::{Deserialize, Serialize};

use crate::classifier::Samples;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    pub c_grid: Vec<f64>,
    /// Multipliers of the `1 / (dim · var(X))` gamma heuristic.
    pub gamma_factors: Vec<f64>,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c_grid: vec![0.1, 1.0, 10.0, 100.0],
            gamma_factors: vec![0.1, 1.0, 10.0],
            tolerance: 1e-3,
            max_iterations: 10_000_000,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_grid.is_empty() || self.gamma_factors.is_empty() {
            return Err(Error::InvalidConfig("SVM grid must not be empty".into()));
        }
        if self.c_grid.iter().chain(&self.gamma_factors).any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig("SVM C and gamma factors must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub c: f64,
    pub gamma: f64,
    pub selection_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub dim: usize,
    pub c: f64,
    pub gamma: f64,
    /// Support vectors, row-major.
    pub support: Vec<f32>,
    /// `alpha_i · y_i` per support vector.
    pub coef: Vec<f64>,
    pub rho: f64,
    pub platt_a: f64,
    pub platt_b: f64,
    pub grid: Vec<GridPoint>,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

/// `1 / (dim · var(X))` over all entries.
pub fn gamma_scale(data: &[f32], dim: usize) -> Result<f64> {
    let n = data.len() as f64;
    let mean = data.iter().map(|v| *v as f64).sum::<f64>() / n;
    let var = data.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::Degenerate("all feature values are identical".into()));
    }
    Ok(1.0 / (dim as f64 * var))
}

struct Dual {
    alpha: Vec<f64>,
    rho: f64,
}

/// Second-order working-set SMO for the C-SVC dual on a precomputed kernel.
fn smo(k: &[f64], y: &[f64], c: f64, tol: f64, max_iter: usize) -> Dual {
    let n = y.len();
    let mut alpha = vec![0.0; n];
    let mut g = vec![-1.0; n];
    let q = |i: usize, j: usize| y[i] * y[j] * k[i * n + j];
    let tau = 1e-12;
    let up = |a: f64, yi: f64| (yi > 0.0 && a < c) || (yi < 0.0 && a > 0.0);
    let low = |a: f64, yi: f64| (yi < 0.0 && a < c) || (yi > 0.0 && a > 0.0);
    for _ in 0..max_iter {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if up(alpha[t], y[t]) && -y[t] * g[t] > gmax {
                gmax = -y[t] * g[t];
                i = t;
            }
        }
        if i == usize::MAX {
            break;
        }
        let mut gmin = f64::INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !low(alpha[t], y[t]) {
                continue;
            }
            let v = -y[t] * g[t];
            gmin = gmin.min(v);
            let b = gmax - v;
            if b > 0.0 {
                let a = k[i * n + i] + k[t * n + t] - 2.0 * k[i * n + t];
                let obj = -(b * b) / if a > 0.0 { a } else { tau };
                if obj < best {
                    best = obj;
                    j = t;
                }
            }
        }
        if gmax - gmin < tol || j == usize::MAX {
            break;
        }
        let (ai, aj) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (q(i, i) + q(j, j) + 2.0 * q(i, j)).max(tau);
            let delta = (-g[i] - g[j]) / quad;
            let diff = ai - aj;
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (q(i, i) + q(j, j) - 2.0 * q(i, j)).max(tau);
            let delta = (g[i] - g[j]) / quad;
            let sum = ai + aj;
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - ai, alpha[j] - aj);
        for t in 0..n {
            g[t] += q(t, i) * di + q(t, j) * dj;
        }
    }

    let (mut ub, mut lb, mut sum_free, mut n_free) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * g[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 { sum_free / n_free as f64 } else { (ub + lb) / 2.0 };
    Dual { alpha, rho }
}

/// Platt sigmoid `P(y=1|f) = 1 / (1 + exp(a·f + b))` fitted by Newton's
/// method with backtracking on regularised targets.
pub fn platt_fit(dec: &[f64], positive: &[bool]) -> (f64, f64) {
    let prior1 = positive.iter().filter(|p| **p).count() as f64;
    let prior0 = positive.len() as f64 - prior1;
    let hi = (prior1 + 1.0) / (prior1 + 2.0);
    let lo = 1.0 / (prior0 + 2.0);
    let t: Vec<f64> = positive.iter().map(|p| if *p { hi } else { lo }).collect();
    let (mut a, mut b) = (0.0, ((prior0 + 1.0) / (prior1 + 1.0)).ln());
    let objective = |a: f64, b: f64| -> f64 {
        dec.iter()
            .zip(&t)
            .map(|(f, ti)| {
                let fapb = f * a + b;
                if fapb >= 0.0 {
                    ti * fapb + (1.0 + (-fapb).exp()).ln()
                } else {
                    (ti - 1.0) * fapb + (1.0 + fapb.exp()).ln()
                }
            })
            .sum()
    };
    let mut fval = objective(a, b);
    for _ in 0..100 {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (1e-12, 1e-12, 0.0, 0.0, 0.0);
        for (f, ti) in dec.iter().zip(&t) {
            let fapb = f * a + b;
            let (p, q) = if fapb >= 0.0 {
                let e = (-fapb).exp();
                (e / (1.0 + e), 1.0 / (1.0 + e))
            } else {
                let e = fapb.exp();
                (1.0 / (1.0 + e), e / (1.0 + e))
            };
            let d2 = p * q;
            h11 += f * f * d2;
            h22 += d2;
            h21 += f * d2;
            let d1 = ti - p;
            g1 += f * d1;
            g2 += d1;
        }
        if g1.abs() < 1e-5 && g2.abs() < 1e-5 {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        while step >= 1e-10 {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = objective(na, nb);
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                break;
            }
            step /= 2.0;
        }
        if step < 1e-10 {
            break;
        }
    }
    (a, b)
}

fn sigmoid_prob(f: f64, a: f64, b: f64) -> f64 {
    let fapb = f * a + b;
    if fapb >= 0.0 {
        let e = (-fapb).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + fapb.exp())
    }
}

fn kernel_matrix(data: &[f32], dim: usize, gamma: f64) -> Vec<f64> {
    let n = data.len() / dim;
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        k[i * n + i] = 1.0;
        for j in 0..i {
            let v = (-gamma * sq_dist(&data[i * dim..(i + 1) * dim], &data[j * dim..(j + 1) * dim])).exp();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

impl SvmModel {
    pub fn decision(&self, x: &[f32]) -> f64 {
        let d = self.dim;
        self.coef
            .iter()
            .enumerate()
            .map(|(s, c)| c * (-self.gamma * sq_dist(&self.support[s * d..(s + 1) * d], x)).exp())
            .sum::<f64>()
            - self.rho
    }

    pub fn predict_rows(&self, data: &[f32]) -> Result<Vec<[f64; 2]>> {
        if data.len() % self.dim != 0 {
            return Err(Error::shape(format!("rows of width {}", self.dim), format!("{} values", data.len())));
        }
        Ok(data
            .chunks(self.dim)
            .map(|x| {
                let p = sigmoid_prob(self.decision(x), self.platt_a, self.platt_b);
                [1.0 - p, p]
            })
            .collect())
    }
}

fn signed_labels(samples: &Samples) -> Vec<f64> {
    samples.rows.iter().map(|r| if r.label == Label::Obese { 1.0 } else { -1.0 }).collect()
}

fn sign_accuracy(decisions: &[f64], y: &[f64]) -> f64 {
    decisions.iter().zip(y).filter(|(d, y)| (**d > 0.0) == (**y > 0.0)).count() as f64 / y.len() as f64
}

/// Fits one SVM per grid point and keeps the one with the best validation
/// accuracy (training accuracy without validation data); ties keep the
/// earlier grid point.
pub fn train_svm_rbf(train: &Samples, validation: Option<&Samples>, cfg: &SvmConfig) -> Result<SvmModel> {
    cfg.validate()?;
    let dim = train.item[2];
    if train.item[0] != 1 || train.item[1] != 1 {
        return Err(Error::shape("feature rows", format!("{:?}", train.item)));
    }
    let y = signed_labels(train);
    if y.is_empty() {
        return Err(Error::Empty);
    }
    if y.iter().all(|v| *v == y[0]) {
        return Err(Error::SingleClass);
    }
    let first = &train.data[..dim];
    if train.data.chunks(dim).all(|r| r == first) {
        return Err(Error::Degenerate("all feature rows are identical".into()));
    }
    let scale = gamma_scale(&train.data, dim)?;
    let n = y.len();
    let mut best: Option<(f64, SvmModel)> = None;
    let mut grid = Vec::new();
    for &gf in &cfg.gamma_factors {
        let gamma = scale * gf;
        let k = kernel_matrix(&train.data, dim, gamma);
        for &c in &cfg.c_grid {
            let dual = smo(&k, &y, c, cfg.tolerance, cfg.max_iterations);
            let sv: Vec<usize> = (0..n).filter(|&i| dual.alpha[i] > 0.0).collect();
            let train_dec: Vec<f64> = (0..n)
                .map(|i| sv.iter().map(|&s| dual.alpha[s] * y[s] * k[s * n + i]).sum::<f64>() - dual.rho)
                .collect();
            let (pa, pb) = platt_fit(&train_dec, &y.iter().map(|v| *v > 0.0).collect::<Vec<_>>());
            let model = SvmModel {
                dim,
                c,
                gamma,
                support: sv.iter().flat_map(|&s| train.data[s * dim..(s + 1) * dim].iter().copied()).collect(),
                coef: sv.iter().map(|&s| dual.alpha[s] * y[s]).collect(),
                rho: dual.rho,
                platt_a: pa,
                platt_b: pb,
                grid: Vec::new(),
            };
            let score = match validation.filter(|v| !v.is_empty()) {
                Some(v) => {
                    let dec: Vec<f64> = v.data.chunks(dim).map(|x| model.decision(x)).collect();
                    sign_accuracy(&dec, &signed_labels(v))
                }
                None => sign_accuracy(&train_dec, &y),
            };
            grid.push(GridPoint { c, gamma, selection_accuracy: score });
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, model));
            }
        }
    }
    let (_, mut model) = best.expect("non-empty grid");
    model.grid = grid;
    Ok(model)
}
