//! Supervised networks (EEGNet, 1-D CNN, MLP) and the common classifier
//! interface shared with the SVM.

use eegvae_core::rng::{named_stream, Stream};
use eegvae_core::{EpochSet, FeatureMatrix, Label, RowMeta};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::*;
use crate::optim::{Adam, AdamConfig};
use crate::svm::SvmModel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Eegnet,
    SvmRbf,
    Mlp,
    Cnn1d,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Eegnet => "eegnet",
            ModelKind::SvmRbf => "svm-rbf",
            ModelKind::Mlp => "mlp",
            ModelKind::Cnn1d => "cnn1d",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Optimisation settings shared by the gradient-trained classifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 1e-3, batch_size: 32, max_epochs: 50, early_stop_patience: 8, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EegNetConfig {
    pub n_temporal_filters: usize,
    pub depth_multiplier: usize,
    pub n_separable_filters: usize,
    pub separable_kernel: usize,
    pub dropout: f64,
    pub train: TrainConfig,
}

impl Default for EegNetConfig {
    fn default() -> Self {
        EegNetConfig {
            n_temporal_filters: 8,
            depth_multiplier: 2,
            n_separable_filters: 16,
            separable_kernel: 16,
            dropout: 0.25,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Cnn1dConfig {
    pub conv1_filters: usize,
    pub conv1_width: usize,
    pub conv2_filters: usize,
    pub conv2_width: usize,
    pub pool1: usize,
    pub drop1: f64,
    pub conv3_filters: usize,
    pub conv3_width: usize,
    pub pool2: usize,
    pub drop2: f64,
    pub leaky_slope: f64,
    pub train: TrainConfig,
}

impl Default for Cnn1dConfig {
    fn default() -> Self {
        Cnn1dConfig {
            conv1_filters: 8,
            conv1_width: 64,
            conv2_filters: 16,
            conv2_width: 32,
            pool1: 4,
            drop1: 0.25,
            conv3_filters: 32,
            conv3_width: 16,
            pool2: 8,
            drop2: 0.25,
            leaky_slope: 0.01,
            train: TrainConfig::default(),
        }
    }
}

impl Cnn1dConfig {
    /// Shortest input that survives both pooling stages.
    pub fn min_length(&self) -> usize {
        self.pool1 * self.pool2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub train: TrainConfig,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig { hidden: vec![128, 64], dropout: 0.25, train: TrainConfig::default() }
    }
}

fn check_dropout(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!("dropout must be in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Network architecture together with the input geometry it was built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    Eegnet { config: EegNetConfig, channels: usize, times: usize, kernel: usize },
    Cnn1d { config: Cnn1dConfig, dim: usize },
    Mlp { config: MlpConfig, dim: usize },
}

impl Architecture {
    pub fn eegnet(config: EegNetConfig, channels: usize, times: usize, rate_hz: f64) -> Result<Self> {
        check_dropout(config.dropout)?;
        config.train.validate()?;
        if config.n_temporal_filters == 0 || config.depth_multiplier == 0 || config.n_separable_filters == 0 {
            return Err(Error::InvalidConfig("EEGNet filter counts must be at least 1".into()));
        }
        if times < 32 {
            return Err(Error::TooShort { needed: 32, have: times });
        }
        Ok(Architecture::Eegnet { config, channels, times, kernel: crate::vae::temporal_kernel(rate_hz) })
    }

    pub fn cnn1d(config: Cnn1dConfig, dim: usize) -> Result<Self> {
        check_dropout(config.drop1)?;
        check_dropout(config.drop2)?;
        config.train.validate()?;
        let c = &config;
        if [c.conv1_filters, c.conv1_width, c.conv2_filters, c.conv2_width, c.conv3_filters, c.conv3_width, c.pool1, c.pool2]
            .contains(&0)
        {
            return Err(Error::InvalidConfig("1-D CNN widths and filter counts must be at least 1".into()));
        }
        if dim < config.min_length() {
            return Err(Error::TooShort { needed: config.min_length(), have: dim });
        }
        Ok(Architecture::Cnn1d { config, dim })
    }

    pub fn mlp(config: MlpConfig, dim: usize) -> Result<Self> {
        check_dropout(config.dropout)?;
        config.train.validate()?;
        if config.hidden.is_empty() || config.hidden.contains(&0) {
            return Err(Error::InvalidConfig("MLP needs at least one non-empty hidden layer".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidConfig("feature dimension must be at least 1".into()));
        }
        Ok(Architecture::Mlp { config, dim })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Architecture::Eegnet { .. } => ModelKind::Eegnet,
            Architecture::Cnn1d { .. } => ModelKind::Cnn1d,
            Architecture::Mlp { .. } => ModelKind::Mlp,
        }
    }

    pub fn train_config(&self) -> &TrainConfig {
        match self {
            Architecture::Eegnet { config, .. } => &config.train,
            Architecture::Cnn1d { config, .. } => &config.train,
            Architecture::Mlp { config, .. } => &config.train,
        }
    }

    /// Per-sample input layout `[planes, rows, width]`.
    pub fn item(&self) -> [usize; 3] {
        match self {
            Architecture::Eegnet { channels, times, .. } => [1, *channels, *times],
            Architecture::Cnn1d { dim, .. } | Architecture::Mlp { dim, .. } => [1, 1, *dim],
        }
    }

    /// Parameter count from the layer formulas, independent of the built network.
    pub fn analytic_parameter_count(&self) -> usize {
        match self {
            Architecture::Eegnet { config: c, channels, times, kernel } => {
                let (f1, d, f2) = (c.n_temporal_filters, c.depth_multiplier, c.n_separable_filters);
                let flat = f2 * (times / 4 / 8);
                f1 * kernel + 2 * f1 + f1 * d * channels + 2 * f1 * d + f1 * d * c.separable_kernel + f1 * d * f2 + 2 * f2 + 2 * flat + 2
            }
            Architecture::Cnn1d { config: c, dim } => {
                let flat = c.conv3_filters * (dim / c.pool1 / c.pool2);
                c.conv1_filters * c.conv1_width
                    + 2 * c.conv1_filters
                    + c.conv2_filters * c.conv1_filters * c.conv2_width
                    + 2 * c.conv2_filters
                    + c.conv3_filters * c.conv2_filters * c.conv3_width
                    + 2 * c.conv3_filters
                    + 2 * flat
                    + 2
            }
            Architecture::Mlp { config, dim } => {
                let mut widths = vec![*dim];
                widths.extend(&config.hidden);
                widths.push(2);
                widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
            }
        }
    }

    fn build(&self, rng: &mut Stream) -> Sequential<f32> {
        match self {
            Architecture::Eegnet { config: c, channels, times, kernel } => {
                let (f1, d, f2) = (c.n_temporal_filters, c.depth_multiplier, c.n_separable_filters);
                let flat = f2 * (times / 4 / 8);
                Sequential::new()
                    .push(Conv1d::new(1, f1, *kernel, 1, false, rng))
                    .push(BatchNorm::new(f1))
                    .push(SpatialConv::new(f1, d, *channels, rng))
                    .push(BatchNorm::new(f1 * d))
                    .push(Act::new(Activation::Elu))
                    .push(AvgPool::new(4))
                    .push(Dropout::new(c.dropout))
                    .push(Conv1d::new(f1 * d, f1 * d, c.separable_kernel, f1 * d, false, rng))
                    .push(Conv1d::new(f1 * d, f2, 1, 1, false, rng))
                    .push(BatchNorm::new(f2))
                    .push(Act::new(Activation::Elu))
                    .push(AvgPool::new(8))
                    .push(Dropout::new(c.dropout))
                    .push(Reshape::new([1, 1, flat]))
                    .push(Dense::new(flat, 2, rng))
            }
            Architecture::Cnn1d { config: c, dim } => {
                let act = || Act::new(Activation::Leaky(c.leaky_slope));
                let flat = c.conv3_filters * (dim / c.pool1 / c.pool2);
                Sequential::new()
                    .push(Conv1d::new(1, c.conv1_filters, c.conv1_width, 1, false, rng))
                    .push(BatchNorm::new(c.conv1_filters))
                    .push(act())
                    .push(Conv1d::new(c.conv1_filters, c.conv2_filters, c.conv2_width, 1, false, rng))
                    .push(BatchNorm::new(c.conv2_filters))
                    .push(act())
                    .push(AvgPool::new(c.pool1))
                    .push(Dropout::new(c.drop1))
                    .push(Conv1d::new(c.conv2_filters, c.conv3_filters, c.conv3_width, 1, false, rng))
                    .push(BatchNorm::new(c.conv3_filters))
                    .push(act())
                    .push(AvgPool::new(c.pool2))
                    .push(Dropout::new(c.drop2))
                    .push(Reshape::new([1, 1, flat]))
                    .push(Dense::new(flat, 2, rng))
            }
            Architecture::Mlp { config, dim } => {
                let mut net = Sequential::new();
                let mut width = *dim;
                for &h in &config.hidden {
                    net = net
                        .push(Dense::new(width, h, rng))
                        .push(Act::new(Activation::Leaky(0.0)))
                        .push(Dropout::new(config.dropout));
                    width = h;
                }
                net.push(Dense::new(width, 2, rng))
            }
        }
    }
}

/// Labelled samples in canonical `(subject, epoch)` order.
pub struct Samples {
    pub item: [usize; 3],
    pub rows: Vec<RowMeta>,
    pub data: Vec<f32>,
}

impl Samples {
    fn sorted(item: [usize; 3], mut rows: Vec<(RowMeta, Vec<f32>)>) -> Result<Self> {
        rows.sort_by(|a, b| (&a.0.subject_id, a.0.epoch_index).cmp(&(&b.0.subject_id, b.0.epoch_index)));
        let n: usize = item.iter().product();
        let mut data = Vec::with_capacity(rows.len() * n);
        let mut meta = Vec::with_capacity(rows.len());
        for (m, v) in rows {
            if v.len() != n {
                return Err(Error::shape(n, v.len()));
            }
            data.extend_from_slice(&v);
            meta.push(m);
        }
        Ok(Samples { item, rows: meta, data })
    }

    pub fn from_features(f: &FeatureMatrix) -> Result<Self> {
        let rows = (0..f.n_rows()).map(|i| (f.rows[i].clone(), f.row(i).to_vec())).collect();
        Self::sorted([1, 1, f.dim], rows)
    }

    pub fn from_epochs(sets: &[EpochSet]) -> Result<Self> {
        let first = sets.first().ok_or(Error::Empty)?;
        let item = [1, first.n_channels(), first.epoch_len];
        let mut rows = Vec::new();
        for s in sets {
            for (e, x) in s.epochs().enumerate() {
                rows.push((RowMeta { subject_id: s.subject_id.clone(), epoch_index: e, label: s.label }, x.to_vec()));
            }
        }
        Self::sorted(item, rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn tensor(&self, idx: &[usize]) -> Tensor<f32> {
        let n: usize = self.item.iter().product();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Tensor::from_vec([idx.len(), self.item[0], self.item[1], self.item[2]], data)
    }

    fn check_classes(&self) -> Result<()> {
        let first = self.rows.first().ok_or(Error::Empty)?.label;
        if self.rows.iter().all(|r| r.label == first) {
            return Err(Error::SingleClass);
        }
        Ok(())
    }
}

/// Row-wise softmax of two-class logits.
pub fn softmax2(logits: &[f32]) -> Vec<[f64; 2]> {
    logits
        .chunks(2)
        .map(|l| {
            let (a, b) = (l[0] as f64, l[1] as f64);
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            [ea / (ea + eb), eb / (ea + eb)]
        })
        .collect()
}

/// Mean cross-entropy of `logits` and its gradient.
pub fn cross_entropy(logits: &[f32], labels: &[Label]) -> (f64, Vec<f32>) {
    let probs = softmax2(logits);
    let b = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (p, l) in probs.iter().zip(labels) {
        let k = l.index();
        loss -= p[k].max(1e-300).ln();
        for (j, pj) in p.iter().enumerate() {
            let target = if j == k { 1.0 } else { 0.0 };
            grad.push(((pj - target) / b) as f32);
        }
    }
    (loss / b, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// A trained neural classifier.
pub struct NetClassifier {
    pub arch: Architecture,
    pub net: Sequential<f32>,
    pub history: Vec<EpochRecord>,
}

fn accuracy(probs: &[[f64; 2]], rows: &[RowMeta]) -> f64 {
    let correct = probs.iter().zip(rows).filter(|(p, r)| usize::from(p[1] > p[0]) == r.label.index()).count();
    correct as f64 / rows.len().max(1) as f64
}

impl NetClassifier {
    pub fn untrained(arch: Architecture) -> Self {
        let seed = arch.train_config().seed;
        let net = arch.build(&mut named_stream(seed, &format!("{}/init", arch.kind())));
        NetClassifier { arch, net, history: Vec::new() }
    }

    pub fn n_parameters(&self) -> usize {
        self.net.n_trainable()
    }

    fn logits(&self, samples: &Samples) -> Vec<f32> {
        let idx: Vec<usize> = (0..samples.len()).collect();
        idx.chunks(64).flat_map(|c| self.net.infer(samples.tensor(c)).data).collect()
    }

    fn evaluate(&self, samples: &Samples) -> (f64, f64) {
        let logits = self.logits(samples);
        let labels: Vec<Label> = samples.rows.iter().map(|r| r.label).collect();
        let (loss, _) = cross_entropy(&logits, &labels);
        (loss, accuracy(&softmax2(&logits), &samples.rows))
    }

    /// Mini-batch Adam on cross-entropy with early stopping on validation loss;
    /// the best validation state is restored at the end.
    pub fn train(arch: Architecture, train: &Samples, validation: Option<&Samples>) -> Result<Self> {
        if train.item != arch.item() {
            return Err(Error::shape(format!("{:?}", arch.item()), format!("{:?}", train.item)));
        }
        train.check_classes()?;
        let cfg = arch.train_config().clone();
        let kind = arch.kind();
        let mut model = Self::untrained(arch);
        let mut opt = Adam::new(AdamConfig { learning_rate: cfg.learning_rate, ..Default::default() });
        let mut order_rng = named_stream(cfg.seed, &format!("{kind}/shuffle"));
        let mut drop_rng = named_stream(cfg.seed, &format!("{kind}/dropout"));
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut best: Option<(f64, Vec<Vec<f32>>)> = None;
        let mut stale = 0;
        let mut step = 0;
        for epoch in 0..cfg.max_epochs {
            order.shuffle(&mut order_rng);
            let (mut loss_sum, mut correct) = (0.0, 0usize);
            for chunk in order.chunks(cfg.batch_size) {
                let x = train.tensor(chunk);
                let labels: Vec<Label> = chunk.iter().map(|&i| train.rows[i].label).collect();
                let logits = model.net.forward(x, &mut drop_rng);
                let (loss, grad) = cross_entropy(&logits.data, &labels);
                if !loss.is_finite() {
                    return Err(Error::Divergence { step, loss });
                }
                correct += softmax2(&logits.data).iter().zip(&labels).filter(|(p, l)| usize::from(p[1] > p[0]) == l.index()).count();
                model.net.backward(Tensor::from_vec(logits.shape, grad));
                opt.step(model.net.params_mut());
                loss_sum += loss * chunk.len() as f64;
                step += 1;
            }
            let val = validation.filter(|v| !v.is_empty()).map(|v| model.evaluate(v));
            model.history.push(EpochRecord {
                epoch,
                train_loss: loss_sum / train.len() as f64,
                train_accuracy: correct as f64 / train.len() as f64,
                val_loss: val.map(|v| v.0),
                val_accuracy: val.map(|v| v.1),
            });
            if let Some((vl, _)) = val {
                if !vl.is_finite() {
                    return Err(Error::Divergence { step, loss: vl });
                }
                if best.as_ref().is_none_or(|(b, _)| vl < *b) {
                    best = Some((vl, model.net.state("net").into_iter().map(|(_, v)| v.clone()).collect()));
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
            for ((_, dst), src) in model.net.state_mut("net").into_iter().zip(snap) {
                *dst = src;
            }
        }
        Ok(model)
    }

    pub fn predict(&self, samples: &Samples) -> Result<Vec<[f64; 2]>> {
        if samples.item != self.arch.item() {
            return Err(Error::shape(format!("{:?}", self.arch.item()), format!("{:?}", samples.item)));
        }
        Ok(softmax2(&self.logits(samples)))
    }

    /// Activations entering the output layer, one row per sample.
    pub fn penultimate(&self, samples: &Samples) -> Result<FeatureMatrix> {
        if samples.item != self.arch.item() {
            return Err(Error::shape(format!("{:?}", self.arch.item()), format!("{:?}", samples.item)));
        }
        let n_layers = self.net.layers.len() - 1;
        let idx: Vec<usize> = (0..samples.len()).collect();
        let mut values = Vec::new();
        let mut dim = 0;
        for c in idx.chunks(64) {
            let h = self.net.infer_prefix(samples.tensor(c), n_layers);
            dim = h.item_len();
            values.extend(h.data);
        }
        Ok(FeatureMatrix::new(dim, values, samples.rows.clone(), format!("{}-penultimate", self.arch.kind()))?)
    }
}

/// What a model consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InputContract {
    RawEpochs { channels: usize, times: usize },
    FeatureRows { dim: usize },
}

impl std::fmt::Display for InputContract {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InputContract::RawEpochs { channels, times } => write!(f, "raw epochs [{channels}x{times}]"),
            InputContract::FeatureRows { dim } => write!(f, "feature rows of width {dim}"),
        }
    }
}

#[derive(Clone, Copy)]
pub enum ModelInput<'a> {
    Epochs(&'a [EpochSet]),
    Features(&'a FeatureMatrix),
}

impl ModelInput<'_> {
    fn describe(&self) -> String {
        match self {
            ModelInput::Epochs(s) => match s.first() {
                Some(e) => format!("raw epochs [{}x{}]", e.n_channels(), e.epoch_len),
                None => "no epochs".into(),
            },
            ModelInput::Features(f) => format!("feature rows of width {}", f.dim),
        }
    }
}

pub enum ClassifierModel {
    Net(NetClassifier),
    Svm(SvmModel),
}

impl ClassifierModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            ClassifierModel::Net(n) => n.arch.kind(),
            ClassifierModel::Svm(_) => ModelKind::SvmRbf,
        }
    }

    pub fn contract(&self) -> InputContract {
        match self {
            ClassifierModel::Net(n) => match &n.arch {
                Architecture::Eegnet { channels, times, .. } => InputContract::RawEpochs { channels: *channels, times: *times },
                Architecture::Cnn1d { dim, .. } | Architecture::Mlp { dim, .. } => InputContract::FeatureRows { dim: *dim },
            },
            ClassifierModel::Svm(s) => InputContract::FeatureRows { dim: s.dim },
        }
    }

    fn contract_error(&self, input: &ModelInput<'_>) -> Error {
        Error::Contract { kind: self.kind().to_string(), expected: self.contract().to_string(), got: input.describe() }
    }

    /// Converts an input to samples after checking it against the contract.
    pub fn samples(&self, input: &ModelInput<'_>) -> Result<Samples> {
        let ok = match (self.contract(), input) {
            (InputContract::RawEpochs { channels, times }, ModelInput::Epochs(sets)) => {
                sets.iter().all(|s| s.n_channels() == channels && s.epoch_len == times)
            }
            (InputContract::FeatureRows { dim }, ModelInput::Features(f)) => f.dim == dim,
            _ => false,
        };
        if !ok {
            return Err(self.contract_error(input));
        }
        match input {
            ModelInput::Epochs(sets) => Samples::from_epochs(sets),
            ModelInput::Features(f) => Samples::from_features(f),
        }
    }

    /// Class probabilities `[lean, obese]` per row, in canonical row order,
    /// paired with the row provenance.
    pub fn predict(&self, input: ModelInput<'_>) -> Result<(Vec<RowMeta>, Vec<[f64; 2]>)> {
        let samples = self.samples(&input)?;
        let probs = match self {
            ClassifierModel::Net(n) => n.predict(&samples)?,
            ClassifierModel::Svm(s) => s.predict_rows(&samples.data)?,
        };
        Ok((samples.rows, probs))
    }
}
