//! Recording → epoch-set chain: discard head, resample, band-pass, epoch,
//! standardize.
//!
//! Every stage is a pure per-recording transform. Labels are carried along
//! untouched and never read.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::{rational_approx, resample_poly, Sos};
use crate::error::{Error, Result};
use crate::io::{read_f32_file_checked, read_json, write_f32_file, write_json};
use crate::types::{EpochSet, Label, Normalization, Recording};

/// Where standardization statistics are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeMode {
    /// Over the subject's concatenated epochs (remainder excluded).
    #[default]
    AfterEpoching,
    /// Over the whole filtered recording, before the remainder is dropped.
    BeforeEpoching,
    /// Leave epochs in microvolts.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub discard_s: f64,
    pub target_rate_hz: f64,
    pub lo_hz: f64,
    pub hi_hz: f64,
    pub filter_order: usize,
    pub epoch_s: f64,
    pub normalize: NormalizeMode,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            discard_s: 5.0,
            target_rate_hz: 128.0,
            lo_hz: 0.1,
            hi_hz: 45.0,
            filter_order: 4,
            epoch_s: 10.0,
            normalize: NormalizeMode::AfterEpoching,
        }
    }
}

/// Drops the first `⌊seconds × rate⌋` samples.
pub fn discard_head(rec: &Recording, seconds: f64) -> Result<Recording> {
    if !(seconds.is_finite() && seconds >= 0.0) {
        return Err(Error::InvalidConfig(format!("discard seconds must be ≥ 0, got {seconds}")));
    }
    let drop = (seconds * rec.rate_hz).floor() as usize;
    let n = rec.n_times();
    if drop > 0 && drop >= n {
        return Err(Error::TooShort { needed: drop, have: n });
    }
    let samples = (0..rec.n_channels()).flat_map(|c| rec.channel(c)[drop..].iter().copied()).collect();
    Ok(Recording { samples, ..rec.clone() })
}

/// Band-limited rational resampling to `target_hz`.
pub fn resample(rec: &Recording, target_hz: f64) -> Result<Recording> {
    if !(target_hz.is_finite() && target_hz > 0.0) {
        return Err(Error::InvalidConfig(format!("target rate must be positive, got {target_hz}")));
    }
    let ratio = target_hz / rec.rate_hz;
    let (up, down) = rational_approx(ratio, 1000)
        .filter(|&(p, q)| ((p as f64 / q as f64) - ratio).abs() <= 1e-9 * ratio)
        .ok_or(Error::IrrationalRatio { from: rec.rate_hz, target: target_hz })?;
    if up == down {
        return Ok(Recording { rate_hz: target_hz, ..rec.clone() });
    }
    let out_len = (rec.n_times() as f64 * ratio).round() as usize;
    rec.map_channels(target_hz, |x| Ok(resample_poly(x, up as usize, down as usize, out_len)))
}

/// Zero-phase Butterworth band-pass (`order` poles per edge, applied
/// forward and backward).
pub fn bandpass(rec: &Recording, lo_hz: f64, hi_hz: f64) -> Result<Recording> {
    bandpass_order(rec, lo_hz, hi_hz, 4)
}

pub fn bandpass_order(rec: &Recording, lo_hz: f64, hi_hz: f64, order: usize) -> Result<Recording> {
    let sos = Sos::butterworth_bandpass(order, lo_hz, hi_hz, rec.rate_hz)?;
    // three time constants of the high-pass edge
    let padlen = (3.0 * rec.rate_hz / lo_hz).ceil() as usize;
    rec.map_channels(rec.rate_hz, |x| Ok(sos.filtfilt(x, padlen)))
}

/// Cuts consecutive non-overlapping epochs of `epoch_s` seconds; the
/// trailing remainder is dropped.
pub fn epoch_segment(rec: &Recording, epoch_s: f64) -> Result<EpochSet> {
    let epoch_len = (epoch_s * rec.rate_hz).round() as usize;
    if epoch_len == 0 {
        return Err(Error::InvalidConfig(format!("epoch length {epoch_s} s is zero samples")));
    }
    let n = rec.n_times();
    let n_epochs = n / epoch_len;
    if n_epochs == 0 {
        return Err(Error::TooShort { needed: epoch_len - 1, have: n });
    }
    let c = rec.n_channels();
    let mut data = Vec::with_capacity(n_epochs * c * epoch_len);
    for e in 0..n_epochs {
        for ch in 0..c {
            data.extend_from_slice(&rec.channel(ch)[e * epoch_len..(e + 1) * epoch_len]);
        }
    }
    Ok(EpochSet {
        subject_id: rec.subject_id.clone(),
        label: rec.label,
        rate_hz: rec.rate_hz,
        channels: rec.channels.clone(),
        epoch_len,
        data,
        normalization: None,
    })
}

fn channel_stats(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

fn is_zero_variance(mean: f64, std: f64) -> bool {
    !(std > 1e-12 * mean.abs().max(1.0))
}

/// Per-channel z-score over all of the subject's epochs concatenated.
pub fn zscore_normalize(es: &EpochSet) -> Result<EpochSet> {
    if es.n_epochs() == 0 {
        return Err(Error::Empty(format!("epoch set of {}", es.subject_id)));
    }
    let (c, t) = (es.n_channels(), es.epoch_len);
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for ch in 0..c {
        let size = es.epoch_size();
        let vals = (0..es.n_epochs())
            .flat_map(move |e| es.data[e * size + ch * t..e * size + (ch + 1) * t].iter().map(|&v| v as f64));
        let (m, s) = channel_stats(vals);
        if is_zero_variance(m, s) {
            return Err(Error::ZeroVariance { subject: es.subject_id.clone(), channel: es.channels[ch].clone() });
        }
        mean.push(m);
        std.push(s);
    }
    Ok(apply_normalization(es, Normalization { mean, std }))
}

fn apply_normalization(es: &EpochSet, norm: Normalization) -> EpochSet {
    let (c, t) = (es.n_channels(), es.epoch_len);
    let mut data = es.data.clone();
    for ep in data.chunks_exact_mut(c * t) {
        for ch in 0..c {
            let (m, s) = (norm.mean[ch], norm.std[ch]);
            for v in &mut ep[ch * t..(ch + 1) * t] {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
    }
    EpochSet { data, normalization: Some(norm), ..es.clone() }
}

/// Statistics over a whole recording, for [`NormalizeMode::BeforeEpoching`].
fn recording_normalization(rec: &Recording) -> Result<Normalization> {
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for ch in 0..rec.n_channels() {
        let (m, s) = channel_stats(rec.channel(ch).iter().map(|&v| v as f64));
        if is_zero_variance(m, s) {
            return Err(Error::ZeroVariance { subject: rec.subject_id.clone(), channel: rec.channels[ch].clone() });
        }
        mean.push(m);
        std.push(s);
    }
    Ok(Normalization { mean, std })
}

/// Full chain for one recording.
pub fn preprocess_recording(rec: &Recording, cfg: &PreprocessConfig) -> Result<EpochSet> {
    let rec = discard_head(rec, cfg.discard_s)?;
    let rec = resample(&rec, cfg.target_rate_hz)?;
    let rec = bandpass_order(&rec, cfg.lo_hz, cfg.hi_hz, cfg.filter_order)?;
    match cfg.normalize {
        NormalizeMode::AfterEpoching => zscore_normalize(&epoch_segment(&rec, cfg.epoch_s)?),
        NormalizeMode::BeforeEpoching => {
            let norm = recording_normalization(&rec)?;
            Ok(apply_normalization(&epoch_segment(&rec, cfg.epoch_s)?, norm))
        }
        NormalizeMode::None => epoch_segment(&rec, cfg.epoch_s),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochFileEntry {
    pub id: String,
    pub label: Label,
    pub n_epochs: usize,
    pub file: String,
    pub sha256: String,
    pub normalization: Option<Normalization>,
}

/// `epochs.json`: layout description plus one entry per subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochsManifest {
    pub format_version: u32,
    pub channels: Vec<String>,
    pub rate_hz: f64,
    pub epoch_len: usize,
    pub layout: String,
    pub params: PreprocessConfig,
    pub subjects: Vec<EpochFileEntry>,
}

pub const EPOCHS_FORMAT_VERSION: u32 = 1;

/// Writes `<dir>/<subject>.epochs` (f32 LE, `[E × C × T]`) and `epochs.json`.
pub fn write_epoch_sets(dir: &Path, sets: &[EpochSet], params: &PreprocessConfig) -> Result<EpochsManifest> {
    let first = sets.first().ok_or_else(|| Error::Empty("epoch sets".into()))?;
    let mut subjects = Vec::with_capacity(sets.len());
    for es in sets {
        if es.channels != first.channels || es.epoch_len != first.epoch_len {
            return Err(Error::shape(
                format!("{} channels x {}", first.channels.len(), first.epoch_len),
                format!("{} channels x {}", es.channels.len(), es.epoch_len),
            ));
        }
        let file = format!("{}.epochs", es.subject_id);
        let sha256 = write_f32_file(&dir.join(&file), &es.data)?;
        subjects.push(EpochFileEntry {
            id: es.subject_id.clone(),
            label: es.label,
            n_epochs: es.n_epochs(),
            file,
            sha256,
            normalization: es.normalization.clone(),
        });
    }
    let manifest = EpochsManifest {
        format_version: EPOCHS_FORMAT_VERSION,
        channels: first.channels.clone(),
        rate_hz: first.rate_hz,
        epoch_len: first.epoch_len,
        layout: "f32le epoch-major [E x C x T]".into(),
        params: params.clone(),
        subjects,
    };
    write_json(&dir.join("epochs.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_epoch_sets(dir: &Path) -> Result<(EpochsManifest, Vec<EpochSet>)> {
    let manifest: EpochsManifest = read_json(&dir.join("epochs.json"))?;
    let mut seen = BTreeMap::new();
    let mut sets = Vec::with_capacity(manifest.subjects.len());
    for s in &manifest.subjects {
        if seen.insert(s.id.clone(), ()).is_some() {
            return Err(Error::DuplicateSubject(s.id.clone()));
        }
        let path = dir.join(&s.file);
        let data = read_f32_file_checked(&path, &s.sha256)?;
        if data.len() != s.n_epochs * manifest.channels.len() * manifest.epoch_len {
            return Err(Error::Integrity { path, reason: "epoch count does not match manifest".into() });
        }
        sets.push(EpochSet {
            subject_id: s.id.clone(),
            label: s.label,
            rate_hz: manifest.rate_hz,
            channels: manifest.channels.clone(),
            epoch_len: manifest.epoch_len,
            data,
            normalization: s.normalization.clone(),
        });
    }
    Ok((manifest, sets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::amplitude_spectrum;
    use crate::types::standard_channels;
    use std::f64::consts::PI;

    fn rec_from_fn(rate: f64, n: usize, n_ch: usize, f: impl Fn(usize, usize) -> f64) -> Recording {
        let channels: Vec<String> = standard_channels().into_iter().take(n_ch).collect();
        let samples = (0..n_ch).flat_map(|c| (0..n).map(move |i| (c, i))).map(|(c, i)| f(c, i) as f32).collect();
        Recording::new("s001", Label::Lean, rate, channels, samples).unwrap()
    }

    #[test]
    fn discard_head_lengths() {
        let rec = rec_from_fn(256.0, 270 * 256, 2, |_, i| i as f64);
        let out = discard_head(&rec, 5.0).unwrap();
        assert_eq!(out.n_times(), 67840);
        assert_eq!(out.channel(1)[0], 1280.0);
        assert_eq!(discard_head(&rec, 0.0).unwrap(), rec);
        let short = rec_from_fn(256.0, 4 * 256, 1, |_, _| 0.0);
        assert!(matches!(discard_head(&short, 5.0), Err(Error::TooShort { .. })));
    }

    #[test]
    fn resample_length_and_dc() {
        let rec = rec_from_fn(256.0, 67840, 1, |_, _| 7.25);
        let out = resample(&rec, 128.0).unwrap();
        assert_eq!(out.n_times(), 33920);
        assert!(out.samples.iter().all(|v| (v - 7.25).abs() < 1e-6));
        let up = resample(&rec_from_fn(128.0, 300, 1, |_, _| -3.0), 250.0).unwrap();
        assert_eq!(up.n_times(), 586);
        assert!(up.samples.iter().all(|v| (v + 3.0).abs() < 1e-6));
    }

    #[test]
    fn resample_rejects_irrational_ratio() {
        let rec = rec_from_fn(256.0, 512, 1, |_, _| 0.0);
        assert!(matches!(resample(&rec, 256.0 * std::f64::consts::SQRT_2), Err(Error::IrrationalRatio { .. })));
        assert!(resample(&rec, 0.0).is_err());
    }

    #[test]
    fn resampled_sine_keeps_frequency_and_amplitude() {
        let rec = rec_from_fn(256.0, 256 * 64, 1, |_, i| 2.0 * (2.0 * PI * 5.0 * i as f64 / 256.0).sin());
        let out = resample(&rec, 128.0).unwrap();
        let x: Vec<f64> = out.channel(0).iter().map(|&v| v as f64).collect();
        let amp = amplitude_spectrum(&x);
        let (peak, &a) = amp.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        assert_eq!(peak as f64 * 128.0 / x.len() as f64, 5.0);
        assert!((a - 2.0).abs() / 2.0 < 0.01, "{a}");
    }

    #[test]
    fn bandpass_rejects_bad_edges() {
        let rec = rec_from_fn(128.0, 1280, 1, |_, i| i as f64);
        assert!(matches!(bandpass(&rec, 10.0, 5.0), Err(Error::InvalidBand { .. })));
        assert!(matches!(bandpass(&rec, 1.0, 70.0), Err(Error::InvalidBand { .. })));
    }

    #[test]
    fn epoch_segmentation_boundaries() {
        let rec = rec_from_fn(128.0, 33920, 3, |c, i| (c * 100000 + i) as f64);
        let es = epoch_segment(&rec, 10.0).unwrap();
        assert_eq!(es.n_epochs(), 26);
        assert_eq!(es.epoch_len, 1280);
        // concatenating epochs reproduces the first 26*1280 samples per channel
        for c in 0..3 {
            let cat: Vec<f32> = es.epochs().flat_map(|ep| ep[c * 1280..(c + 1) * 1280].to_vec()).collect();
            assert_eq!(&cat[..], &rec.channel(c)[..26 * 1280]);
        }
        assert_eq!(epoch_segment(&rec_from_fn(128.0, 1280, 1, |_, _| 0.0), 10.0).unwrap().n_epochs(), 1);
        assert!(matches!(epoch_segment(&rec_from_fn(128.0, 1279, 1, |_, _| 0.0), 10.0), Err(Error::TooShort { .. })));
    }

    #[test]
    fn zscore_properties() {
        let rec = rec_from_fn(128.0, 2560, 2, |c, i| 50.0 + (c as f64 + 1.0) * ((i * 7919) % 113) as f64);
        let es = zscore_normalize(&epoch_segment(&rec, 10.0).unwrap()).unwrap();
        for c in 0..2 {
            let v: Vec<f64> = es.epochs().flat_map(|ep| ep[c * 1280..(c + 1) * 1280].iter().map(|&x| x as f64)).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6, "{m} {s}");
        }
        let again = zscore_normalize(&es).unwrap();
        assert!(again.data.iter().zip(&es.data).all(|(a, b)| (a - b).abs() < 1e-6));

        let flat = rec_from_fn(128.0, 1280, 2, |c, i| if c == 0 { i as f64 } else { 4.0 });
        let err = zscore_normalize(&epoch_segment(&flat, 10.0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::ZeroVariance { ref channel, .. } if channel == "Fp2"));
    }

    #[test]
    fn bandpass_is_linear() {
        let x = rec_from_fn(128.0, 2000, 1, |_, i| ((i * 37) % 101) as f64 - 50.0);
        let y = rec_from_fn(128.0, 2000, 1, |_, i| (i as f64 * 0.3).sin() * 20.0 + 3.0);
        let comb = rec_from_fn(128.0, 2000, 1, |_, i| {
            2.0 * (((i * 37) % 101) as f64 - 50.0) - 0.5 * ((i as f64 * 0.3).sin() * 20.0 + 3.0)
        });
        let (fx, fy, fc) = (bandpass(&x, 0.1, 45.0).unwrap(), bandpass(&y, 0.1, 45.0).unwrap(), bandpass(&comb, 0.1, 45.0).unwrap());
        let scale = fc.samples.iter().map(|v| v.abs()).fold(0.0f32, f32::max) as f64;
        for i in 0..2000 {
            let lin = 2.0 * fx.samples[i] as f64 - 0.5 * fy.samples[i] as f64;
            assert!((lin - fc.samples[i] as f64).abs() <= 1e-5 * scale);
        }
    }

    #[test]
    fn pipeline_ignores_labels() {
        let a = rec_from_fn(256.0, 256 * 30, 2, |c, i| ((i * (c + 3)) % 17) as f64 + (i as f64 * 0.05).sin());
        let mut b = a.clone();
        b.label = Label::Obese;
        let cfg = PreprocessConfig::default();
        let (ea, eb) = (preprocess_recording(&a, &cfg).unwrap(), preprocess_recording(&b, &cfg).unwrap());
        assert_eq!(ea.data, eb.data);
        assert_eq!(ea.channels, a.channels);
    }

    #[test]
    fn normalize_before_epoching_flag() {
        let rec = rec_from_fn(256.0, 256 * 30, 1, |_, i| (i as f64 * 0.21).sin() * 10.0 + (i as f64 * 0.013).cos());
        let before = PreprocessConfig { normalize: NormalizeMode::BeforeEpoching, ..Default::default() };
        let none = PreprocessConfig { normalize: NormalizeMode::None, ..Default::default() };
        let es = preprocess_recording(&rec, &before).unwrap();
        assert!(es.normalization.is_some());
        assert!(preprocess_recording(&rec, &none).unwrap().normalization.is_none());
    }

    #[test]
    fn epoch_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = rec_from_fn(128.0, 2600, 2, |c, i| (c + i) as f64);
        let es = epoch_segment(&rec, 10.0).unwrap();
        let manifest = write_epoch_sets(dir.path(), &[es.clone()], &PreprocessConfig::default()).unwrap();
        assert_eq!(manifest.subjects[0].n_epochs, 2);
        let (_, back) = read_epoch_sets(dir.path()).unwrap();
        assert_eq!(back[0], es);
    }
}
