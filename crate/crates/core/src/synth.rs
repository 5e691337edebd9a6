//! Deterministic surrogate resting-state EEG corpus.
//!
//! Each recording is the sum of three parts:
//!
//! * a 1/f ("pink") background, independent per channel, RMS
//!   [`BACKGROUND_RMS_UV`];
//! * a subject fingerprint: a narrow-band alpha rhythm at the subject's own
//!   peak frequency on every channel with subject-specific gains and phase
//!   offsets, plus a broadband recording gain per channel (electrode and
//!   volume-conduction differences), all scaled by `confound_strength`;
//! * for class 1 only, an extra alpha source at the subject's peak
//!   concentrated on O1/O2 (light spill to the parietal/posterior temporal
//!   row), scaled by `class_snr`.
//!
//! Every subject draws from its own named stream, so the corpus is a pure
//! function of the configuration regardless of scheduling.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_f32_file_checked, read_json, write_f32_file, write_json};
use crate::rng::{named_stream, Stream};
use crate::types::{standard_channels, Label, Recording};

pub const BACKGROUND_RMS_UV: f64 = 10.0;
/// Below this frequency the pink spectrum is held flat.
const PINK_FLOOR_HZ: f64 = 0.5;
/// Standard deviation of the alpha spectral peak.
const ALPHA_WIDTH_HZ: f64 = 0.4;
const GAIN_LOG_SD: f64 = 0.5;
/// Log-spread of the broadband channel gains per unit of confound strength.
const SCALE_LOG_SD: f64 = 1.0;

/// Spatial weights of the class source.
pub fn class_weight(channel: &str) -> f64 {
    match channel {
        "O1" | "O2" => 1.0,
        "T5" | "P3" | "Pz" | "P4" | "T6" => 0.25,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_per_class: usize,
    pub channels: Vec<String>,
    pub native_rate_hz: f64,
    pub duration_s: f64,
    pub class_snr: f64,
    pub confound_strength: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_per_class: 30,
            channels: standard_channels(),
            native_rate_hz: 256.0,
            duration_s: 270.0,
            class_snr: 1.0,
            confound_strength: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_per_class < 1 {
            return bad("n_per_class must be ≥ 1".into());
        }
        for (name, v) in [
            ("native_rate_hz", self.native_rate_hz),
            ("duration_s", self.duration_s),
            ("class_snr", self.class_snr),
            ("confound_strength", self.confound_strength),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite, got {v}"));
            }
        }
        if self.native_rate_hz <= 0.0 {
            return bad("native_rate_hz must be positive".into());
        }
        if self.duration_s < 15.0 {
            return bad(format!("duration_s must be ≥ 15, got {}", self.duration_s));
        }
        if self.class_snr < 0.0 || self.confound_strength < 0.0 {
            return bad("class_snr and confound_strength must be ≥ 0".into());
        }
        let unique: HashSet<&String> = self.channels.iter().collect();
        if self.channels.len() != 19 || unique.len() != 19 {
            return bad(format!("expected 19 unique channels, got {}", self.channels.len()));
        }
        Ok(())
    }

    pub fn n_timepoints(&self) -> usize {
        (self.duration_s * self.native_rate_hz).round() as usize
    }

    /// Subject ids and labels; classes alternate so ids carry no label.
    pub fn subjects(&self) -> Vec<(String, Label)> {
        (0..2 * self.n_per_class)
            .map(|i| (format!("s{:03}", i + 1), if i % 2 == 0 { Label::Lean } else { Label::Obese }))
            .collect()
    }
}

/// Subject-specific confound parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub subject_id: String,
    pub alpha_peak_hz: f64,
    pub gains: Vec<f64>,
    pub phases: Vec<f64>,
    /// Standard-normal draws setting each channel's broadband recording gain.
    pub scale_z: Vec<f64>,
}

pub fn subject_fingerprint(seed: u64, subject_id: &str) -> Fingerprint {
    let mut rng = named_stream(seed, &format!("fingerprint/{subject_id}"));
    let alpha_peak_hz = (8.0 + 5.0 * rng.random::<f64>()).clamp(8.0, 13.0);
    let gains = (0..19)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (GAIN_LOG_SD * z).exp()
        })
        .collect();
    let phases = (0..19).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let scale_z = (0..19).map(|_| StandardNormal.sample(&mut rng)).collect();
    Fingerprint { subject_id: subject_id.to_string(), alpha_peak_hz, gains, phases, scale_z }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Pink noise scaled to RMS `target`.
fn pink_noise(rng: &mut Stream, n: usize, rate: f64, target: f64) -> Vec<f64> {
    let mut spec = vec![Complex64::new(0.0, 0.0); n];
    for k in 1..=n / 2 {
        let f = (k as f64 * rate / n as f64).max(PINK_FLOOR_HZ);
        let amp = f.powf(-0.5);
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        spec[k] = Complex64::new(re, im) * amp;
        if k != n - k {
            spec[n - k] = spec[k].conj();
        } else {
            spec[k] = Complex64::new(spec[k].re, 0.0);
        }
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
    let mut x: Vec<f64> = spec.iter().map(|c| c.re).collect();
    let r = rms(&x);
    x.iter_mut().for_each(|v| *v *= target / r);
    x
}

/// Analytic narrow-band signal centred at `peak_hz`, real part unit RMS.
fn narrowband(rng: &mut Stream, n: usize, rate: f64, peak_hz: f64) -> Vec<Complex64> {
    let mut spec = vec![Complex64::new(0.0, 0.0); n];
    for (k, s) in spec.iter_mut().enumerate().take(n / 2).skip(1) {
        let f = k as f64 * rate / n as f64;
        let amp = (-0.5 * ((f - peak_hz) / ALPHA_WIDTH_HZ).powi(2)).exp();
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        *s = Complex64::new(re, im) * amp;
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
    let r = (spec.iter().map(|c| c.re * c.re).sum::<f64>() / n as f64).sqrt();
    spec.iter().map(|c| c / r).collect()
}

/// Generates one subject's recording from `stream`.
pub fn generate_recording(
    config: &SynthConfig,
    subject_id: &str,
    label: Label,
    stream: &mut Stream,
) -> Result<Recording> {
    config.validate()?;
    if subject_id.is_empty() {
        return Err(Error::InvalidConfig("empty subject id".into()));
    }
    let n = config.n_timepoints();
    let rate = config.native_rate_hz;
    let fp = subject_fingerprint(config.seed, subject_id);

    // draw order is fixed so that class_snr / confound_strength only rescale
    let background: Vec<Vec<f64>> =
        config.channels.iter().map(|_| pink_noise(stream, n, rate, BACKGROUND_RMS_UV)).collect();
    let subject_alpha = narrowband(stream, n, rate, fp.alpha_peak_hz);
    let class_alpha = narrowband(stream, n, rate, fp.alpha_peak_hz);

    let confound_amp = config.confound_strength * BACKGROUND_RMS_UV;
    let class_amp = if label == Label::Obese { config.class_snr * BACKGROUND_RMS_UV } else { 0.0 };

    let mut samples = Vec::with_capacity(n * config.channels.len());
    for (c, name) in config.channels.iter().enumerate() {
        let rot = Complex64::from_polar(1.0, fp.phases[c]);
        let g = confound_amp * fp.gains[c];
        let w = class_amp * class_weight(name);
        let scale = (SCALE_LOG_SD * config.confound_strength * fp.scale_z[c]).exp();
        for t in 0..n {
            let v = background[c][t] + g * (rot * subject_alpha[t]).re + w * class_alpha[t].re;
            samples.push((scale * v) as f32);
        }
    }
    Recording::new(subject_id, label, rate, config.channels.clone(), samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub label: Label,
    pub n_timepoints: usize,
    pub file: String,
    pub sha256: String,
}

/// `manifest.json` of a corpus directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub channels: Vec<String>,
    pub rate_hz: f64,
    pub subjects: Vec<SubjectEntry>,
    pub config: SynthConfig,
}

pub const CORPUS_FORMAT_VERSION: u32 = 1;

impl CorpusManifest {
    pub fn labels(&self) -> Vec<(String, Label)> {
        self.subjects.iter().map(|s| (s.id.clone(), s.label)).collect()
    }
}

fn subject_stream(seed: u64, id: &str) -> Stream {
    named_stream(seed, &format!("recording/{id}"))
}

/// Generates every recording in memory (parallel over subjects).
pub fn generate_recordings(config: &SynthConfig) -> Result<Vec<Recording>> {
    config.validate()?;
    config
        .subjects()
        .par_iter()
        .map(|(id, label)| generate_recording(config, id, *label, &mut subject_stream(config.seed, id)))
        .collect()
}

/// Writes `<out_dir>/<id>.eeg` for every subject plus `manifest.json`.
pub fn generate_corpus(config: &SynthConfig, out_dir: &Path) -> Result<CorpusManifest> {
    config.validate()?;
    let subjects = config.subjects();
    let mut seen = HashSet::new();
    for (id, _) in &subjects {
        if !seen.insert(id) {
            return Err(Error::DuplicateSubject(id.clone()));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries: Vec<SubjectEntry> = subjects
        .par_iter()
        .map(|(id, label)| {
            let rec = generate_recording(config, id, *label, &mut subject_stream(config.seed, id))?;
            let file = format!("{id}.eeg");
            let sha256 = write_f32_file(&out_dir.join(&file), &rec.samples)?;
            Ok(SubjectEntry { id: id.clone(), label: *label, n_timepoints: rec.n_times(), file, sha256 })
        })
        .collect::<Result<_>>()?;
    let manifest = CorpusManifest {
        format_version: CORPUS_FORMAT_VERSION,
        channels: config.channels.clone(),
        rate_hz: config.native_rate_hz,
        subjects: entries,
        config: config.clone(),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    read_json(&dir.join("manifest.json"))
}

/// Loads one recording, verifying its digest against the manifest.
pub fn read_recording(dir: &Path, manifest: &CorpusManifest, entry: &SubjectEntry) -> Result<Recording> {
    let path = dir.join(&entry.file);
    let samples = read_f32_file_checked(&path, &entry.sha256)?;
    if samples.len() != entry.n_timepoints * manifest.channels.len() {
        return Err(Error::Integrity { path, reason: "sample count does not match manifest".into() });
    }
    Recording::new(entry.id.clone(), entry.label, manifest.rate_hz, manifest.channels.clone(), samples)
}
