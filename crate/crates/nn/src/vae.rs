//! EEGNet-style variational autoencoder over `[channels × time]` epochs.

use std::collections::BTreeMap;

use eegvae_core::rng::{named_stream, Stream};
use eegvae_core::{EpochSet, FeatureMatrix, Label, RowMeta};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::*;
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    #[default]
    Mu,
    MuLogvar,
}

impl FeatureMode {
    pub fn tag(self) -> &'static str {
        match self {
            FeatureMode::Mu => "vae-mu",
            FeatureMode::MuLogvar => "vae-mu-logvar",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub n_temporal_filters: usize,
    pub n_spatial_filters: usize,
    pub latent_dim: usize,
    pub beta: f64,
    pub leaky_slope: f64,
    pub pool: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub features: FeatureMode,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            n_temporal_filters: 8,
            n_spatial_filters: 16,
            latent_dim: 64,
            beta: 1.0,
            leaky_slope: 0.01,
            pool: 4,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 30,
            early_stop_patience: 5,
            features: FeatureMode::Mu,
            seed: 0,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_temporal_filters", self.n_temporal_filters),
            ("n_spatial_filters", self.n_spatial_filters),
            ("latent_dim", self.latent_dim),
            ("pool", self.pool),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.n_spatial_filters % self.n_temporal_filters != 0 {
            return Err(Error::InvalidConfig(format!(
                "n_spatial_filters ({}) must be a multiple of n_temporal_filters ({})",
                self.n_spatial_filters, self.n_temporal_filters
            )));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::InvalidConfig(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidConfig(format!("leaky_slope must be in [0, 1), got {}", self.leaky_slope)));
        }
        Ok(())
    }
}

/// Temporal kernel width for a sampling rate: half a second of samples.
pub fn temporal_kernel(rate_hz: f64) -> usize {
    ((rate_hz / 2.0).round() as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

/// Closed-form KL divergence of `N(mu, exp(logvar))` from the standard normal.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu.iter().zip(logvar).map(|(m, lv)| m * m + (lv.exp() - 1.0 - lv)).sum::<f64>()
}

/// Reconstruction MSE over all elements plus `beta` times the batch-mean KL.
///
/// `mu` and `logvar` hold `batch` rows of equal length.
pub fn vae_loss<S: Scalar>(x: &[S], x_hat: &[S], mu: &[S], logvar: &[S], batch: usize, beta: f64) -> LossBreakdown {
    assert_eq!(x.len(), x_hat.len(), "reconstruction shape");
    assert_eq!(mu.len(), logvar.len(), "latent shape");
    let reconstruction = x.iter().zip(x_hat).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>() / x.len() as f64;
    let mu: Vec<f64> = mu.iter().map(|v| v.as_f64()).collect();
    let lv: Vec<f64> = logvar.iter().map(|v| v.as_f64()).collect();
    let kl = kl_divergence(&mu, &lv) / batch.max(1) as f64;
    LossBreakdown { reconstruction, kl, total: reconstruction + beta * kl }
}

/// `z = mu + exp(logvar / 2) · eps` with `eps ~ N(0, 1)` from `noise`; with no
/// noise stream the draw is degenerate and `z = mu`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], noise: Option<&mut Stream>) -> Vec<f64> {
    match noise {
        None => mu.to_vec(),
        Some(rng) => mu
            .iter()
            .zip(logvar)
            .map(|(m, lv)| {
                let e: f64 = StandardNormal.sample(rng);
                m + (lv / 2.0).exp() * e
            })
            .collect(),
    }
}

/// Architecture hyperparameters fixed at construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeShape {
    pub channels: usize,
    pub times: usize,
    pub kernel: usize,
    pub temporal: usize,
    pub depth: usize,
    pub pool: usize,
    pub latent: usize,
    pub slope: f64,
}

impl VaeShape {
    pub fn new(channels: usize, times: usize, kernel: usize, cfg: &VaeConfig) -> Result<Self> {
        cfg.validate()?;
        if times < cfg.pool {
            return Err(Error::TooShort { needed: cfg.pool, have: times });
        }
        Ok(VaeShape {
            channels,
            times,
            kernel,
            temporal: cfg.n_temporal_filters,
            depth: cfg.n_spatial_filters / cfg.n_temporal_filters,
            pool: cfg.pool,
            latent: cfg.latent_dim,
            slope: cfg.leaky_slope,
        })
    }

    fn spatial(&self) -> usize {
        self.temporal * self.depth
    }

    fn pooled(&self) -> usize {
        self.times / self.pool
    }

    fn flat(&self) -> usize {
        self.spatial() * self.pooled()
    }
}

/// Index of the spatial convolution inside the encoder stack.
const SPATIAL_LAYER: usize = 3;

pub struct VaeNet<S: Scalar> {
    pub shape: VaeShape,
    pub encoder: Sequential<S>,
    pub mu_head: Dense<S>,
    pub logvar_head: Dense<S>,
    pub decoder: Sequential<S>,
    cache: Option<(Vec<S>, Vec<S>)>,
}

/// Outputs of one training-mode pass.
pub struct VaePass<S> {
    pub x_hat: Tensor<S>,
    pub mu: Tensor<S>,
    pub logvar: Tensor<S>,
}

impl<S: Scalar> VaeNet<S> {
    pub fn new(shape: VaeShape, rng: &mut Stream) -> Self {
        let act = || Act::new(Activation::Leaky(shape.slope));
        let s = shape;
        let encoder = Sequential::new()
            .push(Conv1d::new(1, s.temporal, s.kernel, 1, false, rng))
            .push(BatchNorm::new(s.temporal))
            .push(act())
            .push(SpatialConv::new(s.temporal, s.depth, s.channels, rng))
            .push(BatchNorm::new(s.spatial()))
            .push(act())
            .push(AvgPool::new(s.pool))
            .push(Reshape::new([1, 1, s.flat()]));
        let mu_head = Dense::new(s.flat(), s.latent, rng);
        let logvar_head = Dense::new(s.flat(), s.latent, rng);
        let decoder = Sequential::new()
            .push(Dense::new(s.latent, s.flat(), rng))
            .push(Reshape::new([s.spatial(), 1, s.pooled()]))
            .push(Upsample::new(s.pool, s.times))
            .push(BatchNorm::new(s.spatial()))
            .push(act())
            .push(SpatialDeconv::new(s.temporal, s.depth, s.channels, rng))
            .push(BatchNorm::new(s.temporal))
            .push(act())
            .push(Conv1d::new(s.temporal, 1, s.kernel, 1, true, rng));
        VaeNet { shape, encoder, mu_head, logvar_head, decoder, cache: None }
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        let want = [x.shape[0], 1, self.shape.channels, self.shape.times];
        if x.shape != want {
            return Err(Error::shape(format!("{want:?}"), format!("{:?}", x.shape)));
        }
        Ok(())
    }

    /// Training-mode pass with externally supplied standard-normal noise.
    pub fn forward(&mut self, x: Tensor<S>, eps: &[S], rng: &mut Stream) -> Result<VaePass<S>> {
        self.check_input(&x)?;
        let b = x.batch();
        if eps.len() != b * self.shape.latent {
            return Err(Error::shape(b * self.shape.latent, eps.len()));
        }
        let h = self.encoder.forward(x, rng);
        let mu = self.mu_head.forward(h.clone(), rng);
        let logvar = self.logvar_head.forward(h, rng);
        let sigma: Vec<S> = logvar.data.iter().map(|lv| (*lv * S::of(0.5)).exp()).collect();
        let z: Vec<S> = mu.data.iter().zip(&sigma).zip(eps).map(|((m, s), e)| *m + *s * *e).collect();
        let x_hat = self.decoder.forward(Tensor::rows(b, self.shape.latent, z), rng);
        self.cache = Some((sigma, eps.to_vec()));
        Ok(VaePass { x_hat, mu, logvar })
    }

    /// Backpropagates the loss of the last `forward` and accumulates gradients.
    pub fn backward(&mut self, x: &Tensor<S>, pass: &VaePass<S>, beta: f64) {
        let (sigma, eps) = self.cache.take().expect("backward without forward");
        let b = x.batch();
        let n = S::of(x.data.len() as f64);
        let two = S::of(2.0);
        let dxh: Vec<S> = pass.x_hat.data.iter().zip(&x.data).map(|(h, v)| two * (*h - *v) / n).collect();
        let dz = self.decoder.backward(Tensor::from_vec(pass.x_hat.shape, dxh));
        let kb = S::of(beta / b as f64);
        let half = S::of(0.5);
        let mut dmu = dz.data.clone();
        let mut dlv = dz.data;
        for i in 0..dmu.len() {
            let (m, lv) = (pass.mu.data[i], pass.logvar.data[i]);
            dmu[i] = dmu[i] + kb * m;
            dlv[i] = dlv[i] * eps[i] * sigma[i] * half + kb * half * (lv.exp() - S::one());
        }
        let dh_mu = self.mu_head.backward(Tensor::rows(b, self.shape.latent, dmu));
        let dh_lv = self.logvar_head.backward(Tensor::rows(b, self.shape.latent, dlv));
        let dh = Tensor::from_vec(dh_mu.shape, dh_mu.data.iter().zip(&dh_lv.data).map(|(a, c)| *a + *c).collect());
        self.encoder.backward(dh);
    }

    /// Training-mode loss for a batch; used for finite-difference checks.
    pub fn loss(&mut self, x: &Tensor<S>, eps: &[S], beta: f64) -> Result<LossBreakdown> {
        let pass = self.forward(x.clone(), eps, &mut named_stream(0, "unused"))?;
        self.cache = None;
        Ok(vae_loss(&x.data, &pass.x_hat.data, &pass.mu.data, &pass.logvar.data, x.batch(), beta))
    }

    /// Inference-mode `(mu, logvar)` for a batch.
    pub fn encode(&self, x: Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        self.check_input(&x)?;
        let h = self.encoder.infer(x);
        Ok((self.mu_head.infer(h.clone()), self.logvar_head.infer(h)))
    }

    pub fn decode(&self, z: Tensor<S>) -> Result<Tensor<S>> {
        if z.item_len() != self.shape.latent {
            return Err(Error::shape(self.shape.latent, z.item_len()));
        }
        Ok(self.decoder.infer(z.flatten()))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.mu_head.params_mut());
        p.extend(self.logvar_head.params_mut());
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn state(&self) -> Vec<(String, &Vec<S>)> {
        let mut s = self.encoder.state("encoder");
        s.extend(self.mu_head.state().into_iter().map(|(n, v)| (format!("mu.{n}"), v)));
        s.extend(self.logvar_head.state().into_iter().map(|(n, v)| (format!("logvar.{n}"), v)));
        s.extend(self.decoder.state("decoder"));
        s
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Vec<S>)> {
        let mut s = self.encoder.state_mut("encoder");
        s.extend(self.mu_head.state_mut().into_iter().map(|(n, v)| (format!("mu.{n}"), v)));
        s.extend(self.logvar_head.state_mut().into_iter().map(|(n, v)| (format!("logvar.{n}"), v)));
        s.extend(self.decoder.state_mut("decoder"));
        s
    }

    /// Input to the spatial convolution, `[B, temporal, channels, times]`.
    pub fn spatial_input(&self, x: Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(&x)?;
        Ok(self.encoder.infer_prefix(x, SPATIAL_LAYER))
    }

    /// Spatial kernel weights `[temporal·depth, channels]`.
    pub fn spatial_weights(&self) -> Vec<f64> {
        let (_, w) = &self.encoder.layers[SPATIAL_LAYER].state()[0];
        w.iter().map(|v| v.as_f64()).collect()
    }
}

/// Epoch tensors stripped of subject labels.
pub struct UnlabeledEpochs {
    pub channels: usize,
    pub times: usize,
    pub rate_hz: f64,
    /// `(subject_id, epoch_index)` per sample, in canonical order.
    pub keys: Vec<(String, usize)>,
    pub data: Vec<f32>,
}

impl UnlabeledEpochs {
    /// Gathers epochs ordered by subject id then epoch index, independent of
    /// the order of `sets`.
    pub fn from_sets<'a>(sets: impl IntoIterator<Item = &'a EpochSet>) -> Result<Self> {
        let mut sets: Vec<&EpochSet> = sets.into_iter().collect();
        sets.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        let first = sets.first().ok_or(Error::Empty)?;
        let (channels, times, rate_hz) = (first.n_channels(), first.epoch_len, first.rate_hz);
        let mut keys = Vec::new();
        let mut data = Vec::new();
        for s in &sets {
            if s.n_channels() != channels || s.epoch_len != times || s.rate_hz != rate_hz {
                return Err(Error::shape(
                    format!("{channels}x{times} at {rate_hz} Hz"),
                    format!("{}x{} at {} Hz for {}", s.n_channels(), s.epoch_len, s.rate_hz, s.subject_id),
                ));
            }
            for (e, epoch) in s.epochs().enumerate() {
                keys.push((s.subject_id.clone(), e));
                data.extend_from_slice(epoch);
            }
        }
        if keys.is_empty() {
            return Err(Error::Empty);
        }
        Ok(UnlabeledEpochs { channels, times, rate_hz, keys, data })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Tensor<f32> {
        let n = self.channels * self.times;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Tensor::from_vec([idx.len(), 1, self.channels, self.times], data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
    pub val_reconstruction: Option<f64>,
}

pub struct TrainedVae {
    pub config: VaeConfig,
    pub rate_hz: f64,
    pub net: VaeNet<f32>,
    pub history: Vec<HistoryRow>,
}

fn snapshot(net: &VaeNet<f32>) -> Vec<Vec<f32>> {
    net.state().into_iter().map(|(_, v)| v.clone()).collect()
}

fn restore(net: &mut VaeNet<f32>, snap: Vec<Vec<f32>>) {
    for ((_, dst), src) in net.state_mut().into_iter().zip(snap) {
        *dst = src;
    }
}

/// Mean squared reconstruction error of `z = mu` decodings.
fn reconstruction_error(net: &VaeNet<f32>, data: &UnlabeledEpochs, batch: usize) -> f64 {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut sse = 0.0;
    for chunk in idx.chunks(batch) {
        let x = data.batch(chunk);
        let (mu, _) = net.encode(x.clone()).expect("validated shape");
        let xh = net.decode(mu).expect("latent width");
        sse += x.data.iter().zip(&xh.data).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>();
    }
    sse / data.data.len() as f64
}

/// Mini-batch Adam on the VAE objective with early stopping on validation
/// reconstruction error.
pub fn train_vae(train: &UnlabeledEpochs, validation: Option<&UnlabeledEpochs>, cfg: &VaeConfig) -> Result<TrainedVae> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty);
    }
    if let Some(v) = validation {
        if (v.channels, v.times) != (train.channels, train.times) {
            return Err(Error::shape(format!("{}x{}", train.channels, train.times), format!("{}x{}", v.channels, v.times)));
        }
    }
    let shape = VaeShape::new(train.channels, train.times, temporal_kernel(train.rate_hz), cfg)?;
    let mut net = VaeNet::<f32>::new(shape, &mut named_stream(cfg.seed, "vae/init"));
    let mut opt = Adam::new(AdamConfig { learning_rate: cfg.learning_rate, ..Default::default() });
    let mut order_rng = named_stream(cfg.seed, "vae/shuffle");
    let mut noise = named_stream(cfg.seed, "vae/noise");
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Vec<Vec<f32>>)> = None;
    let mut stale = 0;
    let mut step = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut order_rng);
        let (mut rec, mut kl, mut tot, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.batch(chunk);
            let eps: Vec<f32> = (0..chunk.len() * cfg.latent_dim).map(|_| StandardNormal.sample(&mut noise)).collect();
            let pass = net.forward(x.clone(), &eps, &mut noise)?;
            let loss = vae_loss(&x.data, &pass.x_hat.data, &pass.mu.data, &pass.logvar.data, chunk.len(), cfg.beta);
            if !loss.total.is_finite() {
                return Err(Error::Divergence { step, loss: loss.total });
            }
            net.backward(&x, &pass, cfg.beta);
            opt.step(net.params_mut());
            step += 1;
            let w = chunk.len() as f64;
            rec += loss.reconstruction * w;
            kl += loss.kl * w;
            tot += loss.total * w;
            nb += w;
        }
        let val = validation.filter(|v| !v.is_empty()).map(|v| reconstruction_error(&net, v, cfg.batch_size));
        history.push(HistoryRow { epoch, reconstruction: rec / nb, kl: kl / nb, total: tot / nb, val_reconstruction: val });
        if let Some(v) = val {
            if !v.is_finite() {
                return Err(Error::Divergence { step, loss: v });
            }
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, snapshot(&net)));
                stale = 0;
            } else {
                stale += 1;
                if cfg.early_stop_patience > 0 && stale >= cfg.early_stop_patience {
                    break;
                }
            }
        }
    }
    if let Some((_, snap)) = best {
        restore(&mut net, snap);
    }
    Ok(TrainedVae { config: cfg.clone(), rate_hz: train.rate_hz, net, history })
}

/// Per-group channel importance from the spatial layer and the absolute
/// difference between groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialPatterns {
    pub channels: Vec<String>,
    pub lean: Vec<f64>,
    pub obese: Vec<f64>,
    pub difference: Vec<f64>,
}

impl TrainedVae {
    pub fn shape(&self) -> VaeShape {
        self.net.shape
    }

    fn epoch_tensor(&self, es: &EpochSet) -> Result<Tensor<f32>> {
        let s = self.net.shape;
        if es.n_channels() != s.channels || es.epoch_len != s.times {
            return Err(Error::shape(
                format!("[{}x{}]", s.channels, s.times),
                format!("[{}x{}]", es.n_channels(), es.epoch_len),
            ));
        }
        Ok(Tensor::from_vec([es.n_epochs(), 1, s.channels, s.times], es.data.clone()))
    }

    /// `(mu, logvar)` for one epoch given as `[channels × times]`.
    pub fn encode(&self, x: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
        let s = self.net.shape;
        if x.len() != s.channels * s.times {
            return Err(Error::shape(format!("[{}x{}]", s.channels, s.times), format!("{} values", x.len())));
        }
        let (mu, lv) = self.net.encode(Tensor::from_vec([1, 1, s.channels, s.times], x.to_vec()))?;
        Ok((mu.data, lv.data))
    }

    pub fn decode(&self, z: &[f32]) -> Result<Vec<f32>> {
        Ok(self.net.decode(Tensor::rows(1, z.len(), z.to_vec()))?.data)
    }

    pub fn feature_dim(&self) -> usize {
        match self.config.features {
            FeatureMode::Mu => self.config.latent_dim,
            FeatureMode::MuLogvar => 2 * self.config.latent_dim,
        }
    }

    /// One feature row per epoch from the posterior mean.
    pub fn extract_features(&self, es: &EpochSet) -> Result<FeatureMatrix> {
        let x = self.epoch_tensor(es)?;
        let n = es.n_epochs();
        let mut values = Vec::with_capacity(n * self.feature_dim());
        let idx: Vec<usize> = (0..n).collect();
        let item = self.net.shape.channels * self.net.shape.times;
        for chunk in idx.chunks(64) {
            let data = x.data[chunk[0] * item..(chunk[chunk.len() - 1] + 1) * item].to_vec();
            let (mu, lv) = self.net.encode(Tensor::from_vec([chunk.len(), 1, self.net.shape.channels, self.net.shape.times], data))?;
            let l = self.config.latent_dim;
            for r in 0..chunk.len() {
                values.extend_from_slice(&mu.data[r * l..(r + 1) * l]);
                if self.config.features == FeatureMode::MuLogvar {
                    values.extend_from_slice(&lv.data[r * l..(r + 1) * l]);
                }
            }
        }
        let rows = (0..n).map(|e| RowMeta { subject_id: es.subject_id.clone(), epoch_index: e, label: es.label }).collect();
        Ok(FeatureMatrix::new(self.feature_dim(), values, rows, self.config.features.tag())?)
    }

    /// Mean magnitude of each input channel's contribution `|w[o,c]·u[c,t]|`
    /// to the spatial layer, over filters, time and epochs.
    fn channel_contributions(&self, sets: &[&EpochSet]) -> Result<Vec<f64>> {
        let s = self.net.shape;
        let w = self.net.spatial_weights();
        let mut acc = vec![0.0; s.channels];
        let mut count = 0usize;
        for es in sets {
            let u = self.net.spatial_input(self.epoch_tensor(es)?)?;
            for b in 0..u.batch() {
                let item = u.item(b);
                for o in 0..s.temporal * s.depth {
                    let p = o / s.depth;
                    for (c, a) in acc.iter_mut().enumerate() {
                        let wc = w[o * s.channels + c].abs();
                        let row = &item[(p * s.channels + c) * s.times..(p * s.channels + c + 1) * s.times];
                        *a += wc * row.iter().map(|v| v.abs() as f64).sum::<f64>() / s.times as f64;
                    }
                }
                count += 1;
            }
        }
        Ok(acc.iter().map(|v| v / count as f64).collect())
    }

    pub fn spatial_patterns(&self, sets: &[EpochSet]) -> Result<SpatialPatterns> {
        let mut groups: BTreeMap<Label, Vec<&EpochSet>> = BTreeMap::new();
        for es in sets {
            groups.entry(es.label).or_default().push(es);
        }
        let lean_sets = groups.get(&Label::Lean).ok_or_else(|| Error::EmptyGroup("lean".into()))?;
        let obese_sets = groups.get(&Label::Obese).ok_or_else(|| Error::EmptyGroup("obese".into()))?;
        let mut lean = self.channel_contributions(lean_sets)?;
        let mut obese = self.channel_contributions(obese_sets)?;
        // one scale for both groups keeps their difference meaningful
        let max = lean.iter().chain(&obese).fold(0.0f64, |m, v| m.max(*v));
        if max > 0.0 {
            lean.iter_mut().chain(obese.iter_mut()).for_each(|v| *v /= max);
        }
        let difference = lean.iter().zip(&obese).map(|(a, b)| (b - a).abs()).collect();
        Ok(SpatialPatterns { channels: sets[0].channels.clone(), lean, obese, difference })
    }
}
