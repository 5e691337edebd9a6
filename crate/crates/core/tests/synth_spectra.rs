//! Spectral checks of the surrogate corpus, measured with an independent
//! Welch estimator.

use eegvae_core::dsp::{band_power, welch_psd};
use eegvae_core::evaluation::mann_whitney_u;
use eegvae_core::synth::{generate_recordings, SynthConfig};
use eegvae_core::{Label, Recording};

fn channel_psd(rec: &Recording, name: &str) -> (Vec<f64>, Vec<f64>) {
    let c = rec.channels.iter().position(|c| c == name).unwrap();
    let x: Vec<f64> = rec.channel(c).iter().map(|&v| v as f64).collect();
    welch_psd(&x, rec.rate_hz, 1024)
}

fn occipital_alpha(rec: &Recording) -> f64 {
    ["O1", "O2"]
        .iter()
        .map(|ch| {
            let (f, p) = channel_psd(rec, ch);
            band_power(&f, &p, 8.0, 13.0)
        })
        .sum::<f64>()
        / 2.0
}

fn group_alpha(recs: &[Recording], label: Label) -> Vec<f64> {
    recs.iter().filter(|r| r.label == label).map(occipital_alpha).collect()
}

#[test]
fn no_class_signal_means_no_group_difference() {
    let cfg = SynthConfig { seed: 11, class_snr: 0.0, confound_strength: 1.0, ..Default::default() };
    let recs = generate_recordings(&cfg).unwrap();
    assert_eq!(recs.len(), 60);
    let r = mann_whitney_u(&group_alpha(&recs, Label::Lean), &group_alpha(&recs, Label::Obese)).unwrap();
    assert!(r.p_two_sided > 0.01, "p = {}", r.p_two_sided);
}

#[test]
fn without_confounds_subject_power_is_homogeneous() {
    let cfg = SynthConfig { seed: 3, class_snr: 0.0, confound_strength: 0.0, duration_s: 60.0, ..Default::default() };
    let recs = generate_recordings(&cfg).unwrap();
    let powers: Vec<f64> = recs
        .iter()
        .map(|r| {
            (0..r.n_channels())
                .map(|c| {
                    let x: Vec<f64> = r.channel(c).iter().map(|&v| v as f64).collect();
                    let (f, p) = welch_psd(&x, r.rate_hz, 1024);
                    p.iter().sum::<f64>() * (f[1] - f[0])
                })
                .sum::<f64>()
                / r.n_channels() as f64
        })
        .collect();
    let m = powers.iter().sum::<f64>() / powers.len() as f64;
    let sd = (powers.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (powers.len() - 1) as f64).sqrt();
    assert!(sd / m < 0.1, "cv = {}", sd / m);
}

#[test]
fn background_has_one_over_f_slope() {
    let cfg = SynthConfig { seed: 5, n_per_class: 1, class_snr: 0.0, confound_strength: 0.0, ..Default::default() };
    let recs = generate_recordings(&cfg).unwrap();
    for rec in &recs {
        for ch in ["Fp1", "Cz", "O2"] {
            let (f, p) = channel_psd(rec, ch);
            let pts: Vec<(f64, f64)> = f
                .iter()
                .zip(&p)
                .filter(|(f, _)| **f >= 1.0 && **f <= 40.0)
                .map(|(f, p)| (f.ln(), p.ln()))
                .collect();
            let n = pts.len() as f64;
            let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
            let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
                / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
            assert!((slope + 1.0).abs() <= 0.4, "{ch}: slope {slope}");
        }
    }
}

#[test]
fn class_difference_grows_with_snr() {
    for seed in [1, 2, 3] {
        let diffs: Vec<f64> = [0.0, 0.5, 1.5]
            .iter()
            .map(|&snr| {
                let cfg = SynthConfig { seed, n_per_class: 4, duration_s: 30.0, class_snr: snr, ..Default::default() };
                let recs = generate_recordings(&cfg).unwrap();
                let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
                mean(group_alpha(&recs, Label::Obese)) - mean(group_alpha(&recs, Label::Lean))
            })
            .collect();
        assert!(diffs.windows(2).all(|w| w[1] >= w[0]), "seed {seed}: {diffs:?}");
    }
}

#[test]
fn fingerprints_differ_between_seeds() {
    use eegvae_core::synth::subject_fingerprint;
    let (a, b) = (subject_fingerprint(7, "s01"), subject_fingerprint(8, "s01"));
    assert!(a.alpha_peak_hz != b.alpha_peak_hz || a.gains != b.gains || a.phases != b.phases);
}
