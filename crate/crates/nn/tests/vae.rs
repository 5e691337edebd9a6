use std::time::Instant;

use approx::assert_relative_eq;
use eegvae_core::rng::named_stream;
use eegvae_core::{EpochSet, Label};
use eegvae_nn::gradcheck::vae_gradient_check;
use eegvae_nn::vae::*;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn small_cfg() -> VaeConfig {
    VaeConfig { n_temporal_filters: 2, n_spatial_filters: 4, latent_dim: 4, beta: 1.0, ..Default::default() }
}

/// Epoch sets of noise plus a per-subject sinusoid.
fn toy_sets(n_subjects: usize, epochs: usize, channels: usize, times: usize, seed: u64) -> Vec<EpochSet> {
    (0..n_subjects)
        .map(|s| {
            let mut rng = named_stream(seed, &format!("toy/{s}"));
            let f = 0.05 + 0.02 * s as f32;
            let data = (0..epochs * channels * times)
                .map(|i| {
                    let t = (i % times) as f32;
                    let c = ((i / times) % channels) as f32;
                    (f * t + c).sin() + 0.3 * { let v: f32 = StandardNormal.sample(&mut rng); v }
                })
                .collect();
            EpochSet {
                subject_id: format!("s{s:02}"),
                label: Label::from_index(s % 2),
                rate_hz: 16.0,
                channels: (0..channels).map(|c| format!("c{c}")).collect(),
                epoch_len: times,
                data,
                normalization: None,
            }
        })
        .collect()
}

fn fast_cfg() -> VaeConfig {
    VaeConfig { latent_dim: 8, batch_size: 8, max_epochs: 20, learning_rate: 3e-3, seed: 4, ..small_cfg() }
}

#[test]
fn gradient_check_on_scaled_down_model() {
    let start = Instant::now();
    let probes = vae_gradient_check(19, 64, &small_cfg(), 60, 17).unwrap();
    let worst = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    assert!(worst <= 1e-3, "worst probe {:?}", probes.iter().find(|p| p.rel_error == worst));
    let touched: std::collections::HashSet<_> = probes.iter().map(|p| p.tensor.clone()).collect();
    assert!(touched.len() >= 5, "{touched:?}");
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn gradient_check_with_beta_zero_and_wide_latent() {
    let cfg = VaeConfig { beta: 0.0, latent_dim: 6, ..small_cfg() };
    let probes = vae_gradient_check(5, 32, &cfg, 50, 3).unwrap();
    assert!(probes.iter().all(|p| p.rel_error <= 1e-3));
}

#[test]
fn loss_examples() {
    let x = [1.0f64, 2.0, 3.0];
    let l = vae_loss(&x, &x, &[0.0, 0.0], &[0.0, 0.0], 1, 1.0);
    assert_eq!((l.reconstruction, l.kl, l.total), (0.0, 0.0, 0.0));
    assert_eq!(kl_divergence(&[1.0], &[0.0]), 0.5);
    let l = vae_loss(&x, &[1.0, 2.0, 5.0], &[1.0], &[0.0], 1, 2.0);
    assert_relative_eq!(l.reconstruction, 4.0 / 3.0);
    assert_relative_eq!(l.total, 4.0 / 3.0 + 1.0);
}

proptest! {
    #[test]
    fn kl_is_non_negative(v in prop::collection::vec((-5.0f64..5.0, -8.0f64..4.0), 1..32)) {
        let (mu, lv): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        prop_assert!(kl_divergence(&mu, &lv) >= 0.0);
    }

    #[test]
    fn total_at_least_reconstruction(beta in 0.0f64..4.0, m in -3.0f64..3.0, lv in -3.0f64..3.0) {
        let l = vae_loss(&[0.5f64, 1.0], &[0.0, 0.0], &[m], &[lv], 1, beta);
        prop_assert!(l.kl >= 0.0 && l.total >= l.reconstruction);
    }
}

#[test]
fn reparameterization_statistics() {
    assert_eq!(reparameterize(&[0.3, -1.0], &[0.0, 2.0], None), vec![0.3, -1.0]);
    let mut rng = named_stream(5, "reparam");
    let draws: Vec<Vec<f64>> = (0..100_000).map(|_| reparameterize(&[0.0, 0.0], &[0.0, 0.0], Some(&mut rng))).collect();
    for d in 0..2 {
        let n = draws.len() as f64;
        let m = draws.iter().map(|z| z[d]).sum::<f64>() / n;
        let s = (draws.iter().map(|z| (z[d] - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!(m.abs() < 0.02 && (s - 1.0).abs() < 0.02, "dim {d}: mean {m}, std {s}");
    }
    let a = reparameterize(&[1.0], &[0.5], Some(&mut named_stream(1, "z")));
    let b = reparameterize(&[1.0], &[0.5], Some(&mut named_stream(1, "z")));
    assert_eq!(a, b);
}

#[test]
fn default_architecture_shapes() {
    let cfg = VaeConfig::default();
    let shape = VaeShape::new(19, 1280, temporal_kernel(128.0), &cfg).unwrap();
    assert_eq!(shape.kernel, 64);
    let net = VaeNet::<f32>::new(shape, &mut named_stream(0, "init"));
    let mut rng = named_stream(1, "x");
    let x: Vec<f32> = (0..2 * 19 * 1280).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x = eegvae_nn::Tensor::from_vec([2, 1, 19, 1280], x);
    let (mu, lv) = net.encode(x.clone()).unwrap();
    assert_eq!((mu.shape, lv.shape), ([2, 1, 1, 64], [2, 1, 1, 64]));
    assert_eq!(net.encode(x.clone()).unwrap().0, mu);
    let xh = net.decode(mu.clone()).unwrap();
    assert_eq!(xh.shape, [2, 1, 19, 1280]);
    assert!(xh.is_finite());
    let z2 = mu.clone().map(|v| v + 1.0);
    let diff = net.decode(z2).unwrap().data.iter().zip(&xh.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(diff > 0.0);
    let bad = eegvae_nn::Tensor::from_vec([1, 1, 18, 1280], vec![0.0; 18 * 1280]);
    assert!(net.encode(bad).is_err());
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let sets = toy_sets(10, 10, 5, 32, 1);
    let data = UnlabeledEpochs::from_sets(&sets).unwrap();
    assert_eq!(data.len(), 100);
    let a = train_vae(&data, None, &fast_cfg()).unwrap();
    assert_eq!(a.history.len(), 20);
    assert!(a.history.last().unwrap().total < a.history[0].total, "{:?}", a.history);
    let b = train_vae(&data, None, &fast_cfg()).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.net.state(), b.net.state());
}

#[test]
fn labels_do_not_influence_training() {
    let sets = toy_sets(6, 4, 5, 32, 2);
    let mut flipped = sets.clone();
    flipped.iter_mut().for_each(|s| s.label = s.label.flipped());
    flipped.reverse();
    let cfg = VaeConfig { max_epochs: 3, ..fast_cfg() };
    let a = train_vae(&UnlabeledEpochs::from_sets(&sets).unwrap(), None, &cfg).unwrap();
    let b = train_vae(&UnlabeledEpochs::from_sets(&flipped).unwrap(), None, &cfg).unwrap();
    assert_eq!(a.net.state(), b.net.state());
    assert_eq!(a.history, b.history);
}

#[test]
fn beta_zero_is_plain_autoencoder() {
    let sets = toy_sets(6, 6, 5, 32, 3);
    let data = UnlabeledEpochs::from_sets(&sets).unwrap();
    let r = train_vae(&data, None, &VaeConfig { beta: 0.0, max_epochs: 10, ..fast_cfg() }).unwrap();
    assert!(r.history.iter().all(|h| h.total == h.reconstruction));
    assert!(r.history.last().unwrap().reconstruction < r.history[0].reconstruction);
}

#[test]
fn early_stopping_restores_best_validation_model() {
    let sets = toy_sets(8, 6, 5, 32, 4);
    let train = UnlabeledEpochs::from_sets(&sets[..6]).unwrap();
    let val = UnlabeledEpochs::from_sets(&sets[6..]).unwrap();
    let cfg = VaeConfig { max_epochs: 40, early_stop_patience: 2, ..fast_cfg() };
    let r = train_vae(&train, Some(&val), &cfg).unwrap();
    let vals: Vec<f64> = r.history.iter().map(|h| h.val_reconstruction.unwrap()).collect();
    let best = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if r.history.len() < 40 {
        let tail = &vals[vals.len() - 2..];
        assert!(tail.iter().all(|v| *v >= best));
    }
    let (mu, _) = r.encode(sets[6].epoch(0)).unwrap();
    assert!(mu.iter().all(|v| v.is_finite()));
}

#[test]
fn features_are_per_epoch_posterior_means() {
    let mut sets = toy_sets(4, 5, 5, 32, 5);
    let model = train_vae(&UnlabeledEpochs::from_sets(&sets).unwrap(), None, &VaeConfig { max_epochs: 2, ..fast_cfg() }).unwrap();
    let n = 5 * 32;
    let first = sets[0].data[..n].to_vec();
    sets[0].data[n..2 * n].copy_from_slice(&first);
    let f = model.extract_features(&sets[0]).unwrap();
    assert_eq!((f.n_rows(), f.dim, f.source.as_str()), (5, 8, "vae-mu"));
    assert_eq!(f.row(0), f.row(1));
    assert_eq!(f.row(2).to_vec(), model.encode(sets[0].epoch(2)).unwrap().0);

    let mut reversed = sets[0].clone();
    let mut epochs: Vec<Vec<f32>> = sets[0].epochs().map(|e| e.to_vec()).collect();
    epochs.reverse();
    reversed.data = epochs.concat();
    let g = model.extract_features(&reversed).unwrap();
    for i in 0..5 {
        assert_eq!(g.row(i), f.row(4 - i));
    }
}

#[test]
fn spatial_patterns_shapes_and_symmetry() {
    let sets = toy_sets(4, 3, 5, 32, 6);
    let model = train_vae(&UnlabeledEpochs::from_sets(&sets).unwrap(), None, &VaeConfig { max_epochs: 2, ..fast_cfg() }).unwrap();
    let p = model.spatial_patterns(&sets).unwrap();
    assert_eq!((p.lean.len(), p.obese.len(), p.difference.len()), (5, 5, 5));
    let max = p.lean.iter().chain(&p.obese).cloned().fold(0.0, f64::max);
    assert!((max - 1.0).abs() < 1e-12);
    let mut twin = sets.clone();
    for s in twin.iter_mut().skip(1).step_by(2) {
        *s = EpochSet { label: Label::Obese, ..sets[0].clone() };
    }
    twin[0].label = Label::Lean;
    let same: Vec<EpochSet> = vec![twin[0].clone(), EpochSet { label: Label::Obese, ..twin[0].clone() }];
    assert!(model.spatial_patterns(&same).unwrap().difference.iter().all(|d| *d == 0.0));
    assert!(model.spatial_patterns(&sets[..1]).is_err());
}

#[test]
fn invalid_configs_rejected() {
    assert!(VaeConfig { latent_dim: 0, ..Default::default() }.validate().is_err());
    assert!(VaeConfig { beta: -1.0, ..Default::default() }.validate().is_err());
    assert!(VaeConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
    assert!(VaeConfig { n_spatial_filters: 12, ..Default::default() }.validate().is_err());
}

#[test]
fn checkpoint_round_trip_preserves_features() {
    let sets = toy_sets(4, 4, 5, 32, 9);
    let model = train_vae(&UnlabeledEpochs::from_sets(&sets).unwrap(), None, &VaeConfig { max_epochs: 2, ..fast_cfg() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vae.ckpt");
    let digest = eegvae_nn::checkpoint::save_vae(&path, &model).unwrap();
    let loaded = eegvae_nn::checkpoint::load_vae(&path).unwrap();
    assert_eq!(loaded.extract_features(&sets[1]).unwrap(), model.extract_features(&sets[1]).unwrap());
    assert_eq!(loaded.history.len(), model.history.len());
    assert_eq!(eegvae_nn::checkpoint::save_vae(&path, &loaded).unwrap(), digest);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() / 3);
    std::fs::write(&path, bytes).unwrap();
    assert!(eegvae_nn::checkpoint::load_vae(&path).is_err());
}
