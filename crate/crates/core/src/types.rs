//! Shared data model: recordings, epoch sets and feature matrices.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 19 electrodes of the 10-20 montage, in canonical order.
pub const STANDARD_CHANNELS: [&str; 19] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3", "C3", "Cz", "C4", "T4", "T5", "P3", "Pz",
    "P4", "T6", "O1", "O2",
];

pub fn standard_channels() -> Vec<String> {
    STANDARD_CHANNELS.iter().map(|s| s.to_string()).collect()
}

/// Binary class label. `Lean` is class 0, `Obese` is class 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Lean,
    Obese,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Lean => 0,
            Label::Obese => 1,
        }
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::Lean
        } else {
            Label::Obese
        }
    }

    pub fn flipped(self) -> Label {
        Label::from_index(1 - self.index())
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Lean => write!(f, "lean"),
            Label::Obese => write!(f, "obese"),
        }
    }
}

/// One subject's continuous multichannel signal, channel-major, microvolts.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub label: Label,
    pub rate_hz: f64,
    pub channels: Vec<String>,
    /// `[n_channels × n_times]`, row-major.
    pub samples: Vec<f32>,
}

impl Recording {
    pub fn new(
        subject_id: impl Into<String>,
        label: Label,
        rate_hz: f64,
        channels: Vec<String>,
        samples: Vec<f32>,
    ) -> Result<Self> {
        let rec = Recording { subject_id: subject_id.into(), label, rate_hz, channels, samples };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz.is_finite() && self.rate_hz > 0.0) {
            return Err(Error::InvalidConfig(format!("rate_hz must be positive, got {}", self.rate_hz)));
        }
        if self.channels.is_empty() || self.samples.len() % self.channels.len() != 0 {
            return Err(Error::shape(
                format!("multiple of {} channels", self.channels.len()),
                self.samples.len(),
            ));
        }
        if let Some(i) = self.samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("recording {} sample {}", self.subject_id, i)));
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_times(&self) -> usize {
        self.samples.len() / self.channels.len().max(1)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let t = self.n_times();
        &self.samples[c * t..(c + 1) * t]
    }

    pub fn duration_s(&self) -> f64 {
        self.n_times() as f64 / self.rate_hz
    }

    /// Applies `f` to every channel (as f64) and rebuilds the recording.
    pub fn map_channels<F>(&self, rate_hz: f64, mut f: F) -> Result<Recording>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        let mut samples = Vec::new();
        let mut len = None;
        for c in 0..self.n_channels() {
            let row: Vec<f64> = self.channel(c).iter().map(|&v| v as f64).collect();
            let out = f(&row)?;
            match len {
                None => len = Some(out.len()),
                Some(l) if l != out.len() => return Err(Error::shape(l, out.len())),
                _ => {}
            }
            samples.extend(out.into_iter().map(|v| v as f32));
        }
        Ok(Recording {
            subject_id: self.subject_id.clone(),
            label: self.label,
            rate_hz,
            channels: self.channels.clone(),
            samples,
        })
    }
}

/// Per-channel statistics used to standardize a subject's epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fixed-length epochs of one subject, `[n_epochs × n_channels × epoch_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSet {
    pub subject_id: String,
    pub label: Label,
    pub rate_hz: f64,
    pub channels: Vec<String>,
    pub epoch_len: usize,
    pub data: Vec<f32>,
    pub normalization: Option<Normalization>,
}

impl EpochSet {
    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn epoch_size(&self) -> usize {
        self.channels.len() * self.epoch_len
    }

    pub fn n_epochs(&self) -> usize {
        if self.epoch_size() == 0 {
            0
        } else {
            self.data.len() / self.epoch_size()
        }
    }

    pub fn epoch(&self, e: usize) -> &[f32] {
        let s = self.epoch_size();
        &self.data[e * s..(e + 1) * s]
    }

    pub fn epochs(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.epoch_size().max(1))
    }
}

/// Provenance of one feature row.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RowMeta {
    pub subject_id: String,
    pub epoch_index: usize,
    pub label: Label,
}

/// `N × D` feature rows with per-row provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub dim: usize,
    pub values: Vec<f32>,
    pub rows: Vec<RowMeta>,
    pub source: String,
}

impl FeatureMatrix {
    pub fn new(dim: usize, values: Vec<f32>, rows: Vec<RowMeta>, source: impl Into<String>) -> Result<Self> {
        let fm = FeatureMatrix { dim, values, rows, source: source.into() };
        fm.validate()?;
        Ok(fm)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.dim * self.rows.len() {
            return Err(Error::shape(
                format!("{} x {}", self.rows.len(), self.dim),
                format!("{} values", self.values.len()),
            ));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature matrix '{}'", self.source)));
        }
        let mut seen = HashSet::new();
        for r in &self.rows {
            if !seen.insert((r.subject_id.as_str(), r.epoch_index)) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate feature row ({}, {})",
                    r.subject_id, r.epoch_index
                )));
            }
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|i| self.values[i * self.dim + j] as f64).collect()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// Rows whose subject is in `subjects`, in original order.
    pub fn select_subjects(&self, subjects: &HashSet<String>) -> FeatureMatrix {
        let mut values = Vec::new();
        let mut rows = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            if subjects.contains(&r.subject_id) {
                values.extend_from_slice(self.row(i));
                rows.push(r.clone());
            }
        }
        FeatureMatrix { dim: self.dim, values, rows, source: self.source.clone() }
    }

    /// Stacks matrices with the same dimension and source tag.
    pub fn concat(parts: &[FeatureMatrix]) -> Result<FeatureMatrix> {
        let first = parts.first().ok_or_else(|| Error::Empty("feature matrices".into()))?;
        let mut out = FeatureMatrix { dim: first.dim, values: Vec::new(), rows: Vec::new(), source: first.source.clone() };
        for p in parts {
            if p.dim != out.dim {
                return Err(Error::shape(out.dim, p.dim));
            }
            out.values.extend_from_slice(&p.values);
            out.rows.extend(p.rows.iter().cloned());
        }
        out.validate()?;
        Ok(out)
    }
}
