//! Frequency-response checks of the preprocessing chain via FFT.

use std::f64::consts::PI;

use eegvae_core::dsp::amplitude_spectrum;
use eegvae_core::preprocess::{bandpass, preprocess_recording, resample, PreprocessConfig};
use eegvae_core::synth::{generate_recordings, SynthConfig};
use eegvae_core::{Label, Recording};

fn sine_rec(rate: f64, seconds: f64, freq: f64, amp: f64, offset: f64) -> Recording {
    let n = (rate * seconds) as usize;
    let samples = (0..n).map(|i| (offset + amp * (2.0 * PI * freq * i as f64 / rate).sin()) as f32).collect();
    Recording::new("s", Label::Lean, rate, vec!["O1".into()], samples).unwrap()
}

/// Amplitude at `freq` over the central half of the output, away from edges.
fn centre_amplitude(rec: &Recording, freq: f64) -> f64 {
    let n = rec.n_times();
    let x: Vec<f64> = rec.channel(0)[n / 4..n / 4 + n / 2].iter().map(|&v| v as f64).collect();
    let spec = amplitude_spectrum(&x);
    spec[(freq * x.len() as f64 / rec.rate_hz).round() as usize]
}

#[test]
fn fifty_hz_is_attenuated_by_20_db() {
    let out = bandpass(&sine_rec(128.0, 60.0, 50.0, 10.0, 0.0), 0.1, 45.0).unwrap();
    let db = 20.0 * (centre_amplitude(&out, 50.0) / 10.0).log10();
    assert!(db <= -20.0, "{db} dB");
}

#[test]
fn ten_hz_passes_within_1_db() {
    let out = bandpass(&sine_rec(128.0, 60.0, 10.0, 10.0, 0.0), 0.1, 45.0).unwrap();
    let db = 20.0 * (centre_amplitude(&out, 10.0) / 10.0).log10();
    assert!(db.abs() <= 1.0, "{db} dB");
}

#[test]
fn passband_ripple_below_1_db() {
    for f in [1.0, 5.0, 20.0, 30.0, 40.0] {
        let out = bandpass(&sine_rec(128.0, 64.0, f, 5.0, 0.0), 0.1, 45.0).unwrap();
        let db = 20.0 * (centre_amplitude(&out, f) / 5.0).log10();
        assert!(db.abs() <= 1.0, "{f} Hz: {db} dB");
    }
}

#[test]
fn dc_offset_removed() {
    let out = bandpass(&sine_rec(128.0, 265.0, 10.0, 20.0, 100.0), 0.1, 45.0).unwrap();
    let mean = out.channel(0).iter().map(|&v| v as f64).sum::<f64>() / out.n_times() as f64;
    assert!(mean.abs() < 1.0, "mean {mean}");
}

#[test]
fn zero_phase_no_shift() {
    let rec = sine_rec(128.0, 60.0, 6.0, 10.0, 0.0);
    let out = bandpass(&rec, 0.1, 45.0).unwrap();
    let n = rec.n_times();
    let err = (n / 4..3 * n / 4)
        .map(|i| (rec.channel(0)[i] - out.channel(0)[i]).abs())
        .fold(0.0f32, f32::max);
    assert!(err < 0.1, "max deviation {err}");
}

#[test]
fn resampled_sine_peak_preserved() {
    let out = resample(&sine_rec(256.0, 64.0, 5.0, 3.0, 0.0), 128.0).unwrap();
    let x: Vec<f64> = out.channel(0).iter().map(|&v| v as f64).collect();
    let spec = amplitude_spectrum(&x);
    let (k, a) = spec.iter().enumerate().fold((0, 0.0), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
    assert_eq!(k as f64 * 128.0 / x.len() as f64, 5.0);
    assert!((a - 3.0).abs() / 3.0 < 0.01, "amplitude {a}");
}

#[test]
fn default_chain_shapes() {
    let cfg = SynthConfig { n_per_class: 1, ..Default::default() };
    let recs = generate_recordings(&cfg).unwrap();
    let es = preprocess_recording(&recs[0], &PreprocessConfig::default()).unwrap();
    assert_eq!((es.n_epochs(), es.n_channels(), es.epoch_len), (26, 19, 1280));
    assert_eq!(es.channels, recs[0].channels);
    let n = (es.n_epochs() * es.epoch_len) as f64;
    for c in 0..19 {
        let v: Vec<f64> = es.epochs().flat_map(|e| e[c * 1280..(c + 1) * 1280].iter().map(|&x| x as f64)).collect();
        let m = v.iter().sum::<f64>() / n;
        let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6);
    }
}
