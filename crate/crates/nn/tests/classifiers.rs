use eegvae_core::rng::{named_stream, Stream};
use eegvae_core::{EpochSet, FeatureMatrix, Label, RowMeta};
use eegvae_nn::checkpoint::{load_classifier, save_classifier};
use eegvae_nn::classifier::*;
use eegvae_nn::optim::{Adam, AdamConfig};
use eegvae_nn::svm::{train_svm_rbf, SvmConfig};
use eegvae_nn::{Error, Tensor};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

fn gauss(rng: &mut Stream) -> f32 {
    let v: f64 = Normal::new(0.0, 1.0).unwrap().sample(rng);
    v as f32
}

/// Two Gaussian blobs separated along every axis; one subject per 5 rows.
fn blobs(n_per_class: usize, dim: usize, sep: f32, seed: u64, tag: &str) -> FeatureMatrix {
    let mut rng = named_stream(seed, tag);
    let mut values = Vec::new();
    let mut rows = Vec::new();
    for i in 0..2 * n_per_class {
        let label = Label::from_index(i % 2);
        let centre = if label == Label::Obese { sep / 2.0 } else { -sep / 2.0 };
        values.extend((0..dim).map(|_| centre + gauss(&mut rng)));
        rows.push(RowMeta { subject_id: format!("{tag}{:03}", i / 5 * 2 + i % 2), epoch_index: i / 2 % 5 + 100 * (i / 10), label });
    }
    FeatureMatrix::new(dim, values, rows, "test").unwrap()
}

fn fast(max_epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { learning_rate: 3e-3, batch_size: 16, max_epochs, early_stop_patience: 0, seed }
}

fn accuracy(probs: &[[f64; 2]], rows: &[RowMeta]) -> f64 {
    probs.iter().zip(rows).filter(|(p, r)| usize::from(p[1] > p[0]) == r.label.index()).count() as f64 / rows.len() as f64
}

#[test]
fn eegnet_parameter_count_matches_layer_arithmetic() {
    let arch = Architecture::eegnet(EegNetConfig::default(), 19, 1280, 128.0).unwrap();
    // 8·64 + 2·8 + 16·19 + 2·16 + 16·16 + 16·16 + 2·16 + (16·40)·2 + 2
    assert_eq!(arch.analytic_parameter_count(), 2690);
    assert_eq!(NetClassifier::untrained(arch).n_parameters(), 2690);
    for (dim, arch) in [
        (64, Architecture::cnn1d(Cnn1dConfig::default(), 64).unwrap()),
        (64, Architecture::mlp(MlpConfig::default(), 64).unwrap()),
        (40, Architecture::cnn1d(Cnn1dConfig::default(), 40).unwrap()),
    ] {
        assert_eq!(arch.item(), [1, 1, dim]);
        let expected = arch.analytic_parameter_count();
        assert_eq!(NetClassifier::untrained(arch).n_parameters(), expected);
    }
    assert_eq!(Architecture::mlp(MlpConfig::default(), 64).unwrap().analytic_parameter_count(), 64 * 128 + 128 + 128 * 64 + 64 + 64 * 2 + 2);
}

fn toy_epochs(n_subjects: usize, epochs: usize, channels: usize, times: usize, amp: f32) -> Vec<EpochSet> {
    (0..n_subjects)
        .map(|s| {
            let label = Label::from_index(s % 2);
            let mut rng = named_stream(s as u64, "toy-epochs");
            let data = (0..epochs * channels * times)
                .map(|i| {
                    let t = (i % times) as f32;
                    let c = (i / times) % channels;
                    let signal = if label == Label::Obese && c == 0 { amp * (0.8 * t).sin() } else { 0.0 };
                    signal + gauss(&mut rng)
                })
                .collect();
            EpochSet {
                subject_id: format!("s{s:02}"),
                label,
                rate_hz: 32.0,
                channels: (0..channels).map(|c| format!("c{c}")).collect(),
                epoch_len: times,
                data,
                normalization: None,
            }
        })
        .collect()
}

#[test]
fn eegnet_fits_a_trivial_set() {
    let sets = toy_epochs(8, 10, 4, 64, 3.0);
    let cfg = EegNetConfig { train: fast(15, 1), ..Default::default() };
    let arch = Architecture::eegnet(cfg, 4, 64, 32.0).unwrap();
    let samples = Samples::from_epochs(&sets).unwrap();
    let model = NetClassifier::train(arch, &samples, None).unwrap();
    let probs = model.predict(&samples).unwrap();
    assert!(accuracy(&probs, &samples.rows) > 0.9);
    assert!(probs.iter().all(|p| (p[0] + p[1] - 1.0).abs() < 1e-6 && p.iter().all(|v| (0.0..=1.0).contains(v))));
    let feats = model.penultimate(&samples).unwrap();
    assert_eq!((feats.dim, feats.n_rows()), (16 * 2, 80));
    let wrapped = ClassifierModel::Net(model);
    let err = wrapped.predict(ModelInput::Features(&feats)).unwrap_err();
    assert!(matches!(err, Error::Contract { .. }), "{err}");
}

#[test]
fn eegnet_rejects_single_class() {
    let sets: Vec<EpochSet> = toy_epochs(4, 3, 4, 64, 1.0).into_iter().filter(|s| s.label == Label::Lean).collect();
    let arch = Architecture::eegnet(EegNetConfig { train: fast(2, 1), ..Default::default() }, 4, 64, 32.0).unwrap();
    assert!(matches!(NetClassifier::train(arch, &Samples::from_epochs(&sets).unwrap(), None), Err(Error::SingleClass)));
}

#[test]
fn svm_separates_blobs() {
    let train = blobs(40, 2, 10.0, 1, "a");
    let test = blobs(40, 2, 10.0, 2, "b");
    let model = train_svm_rbf(&Samples::from_features(&train).unwrap(), None, &SvmConfig::default()).unwrap();
    assert_eq!(model.grid.len(), 12);
    let wrapped = ClassifierModel::Svm(model);
    let (rows, probs) = wrapped.predict(ModelInput::Features(&test)).unwrap();
    assert_eq!(accuracy(&probs, &rows), 1.0);
    assert!(probs.iter().all(|p| (p[0] + p[1] - 1.0).abs() < 1e-12));
}

fn xor_set() -> FeatureMatrix {
    let mut rng = named_stream(3, "xor");
    let mut values = Vec::new();
    let mut rows = Vec::new();
    for rep in 0..25 {
        for (i, (x, y, l)) in [(0.0, 0.0, 0), (1.0, 1.0, 0), (0.0, 1.0, 1), (1.0, 0.0, 1)].into_iter().enumerate() {
            values.push(x + 0.01 * gauss(&mut rng));
            values.push(y + 0.01 * gauss(&mut rng));
            rows.push(RowMeta { subject_id: format!("x{i}"), epoch_index: rep, label: Label::from_index(l) });
        }
    }
    FeatureMatrix::new(2, values, rows, "xor").unwrap()
}

/// Training accuracy of the least-squares linear classifier.
fn linear_oracle_accuracy(f: &FeatureMatrix) -> f64 {
    let n = f.n_rows();
    let mut xtx = [[0.0f64; 3]; 3];
    let mut xty = [0.0f64; 3];
    for i in 0..n {
        let r = f.row(i);
        let x = [1.0, r[0] as f64, r[1] as f64];
        let y = if f.rows[i].label == Label::Obese { 1.0 } else { -1.0 };
        for a in 0..3 {
            xty[a] += x[a] * y;
            for b in 0..3 {
                xtx[a][b] += x[a] * x[b];
            }
        }
    }
    // Gaussian elimination on the 3x3 normal equations.
    let mut m = [[0.0; 4]; 3];
    for a in 0..3 {
        m[a][..3].copy_from_slice(&xtx[a]);
        m[a][3] = xty[a];
    }
    for p in 0..3 {
        for r in p + 1..3 {
            let k = m[r][p] / m[p][p];
            for c in p..4 {
                m[r][c] -= k * m[p][c];
            }
        }
    }
    let mut w = [0.0; 3];
    for p in (0..3).rev() {
        w[p] = (m[p][3] - (p + 1..3).map(|c| m[p][c] * w[c]).sum::<f64>()) / m[p][p];
    }
    (0..n)
        .filter(|&i| {
            let r = f.row(i);
            let s = w[0] + w[1] * r[0] as f64 + w[2] * r[1] as f64;
            (s > 0.0) == (f.rows[i].label == Label::Obese)
        })
        .count() as f64
        / n as f64
}

#[test]
fn svm_fits_xor_where_linear_fails() {
    let f = xor_set();
    let model = ClassifierModel::Svm(train_svm_rbf(&Samples::from_features(&f).unwrap(), None, &SvmConfig::default()).unwrap());
    let (rows, probs) = model.predict(ModelInput::Features(&f)).unwrap();
    assert!(accuracy(&probs, &rows) > 0.9);
    let lin = linear_oracle_accuracy(&f);
    assert!((lin - 0.5).abs() <= 0.15, "linear oracle accuracy {lin}");
}

#[test]
fn svm_degenerate_inputs() {
    let rows: Vec<RowMeta> = (0..6).map(|i| RowMeta { subject_id: "s".into(), epoch_index: i, label: Label::from_index(i % 2) }).collect();
    let same = FeatureMatrix::new(2, vec![1.0; 12], rows.clone(), "t").unwrap();
    assert!(matches!(train_svm_rbf(&Samples::from_features(&same).unwrap(), None, &SvmConfig::default()), Err(Error::Degenerate(_))));
    let one: Vec<RowMeta> = rows.iter().map(|r| RowMeta { label: Label::Lean, ..r.clone() }).collect();
    let single = FeatureMatrix::new(2, (0..12).map(|v| v as f32).collect(), one, "t").unwrap();
    assert!(matches!(train_svm_rbf(&Samples::from_features(&single).unwrap(), None, &SvmConfig::default()), Err(Error::SingleClass)));
}

#[test]
fn svm_rejects_raw_epochs() {
    let f = blobs(10, 2, 6.0, 4, "c");
    let model = ClassifierModel::Svm(train_svm_rbf(&Samples::from_features(&f).unwrap(), None, &SvmConfig::default()).unwrap());
    let sets = toy_epochs(2, 2, 19, 1280, 1.0);
    assert!(matches!(model.predict(ModelInput::Epochs(&sets)), Err(Error::Contract { .. })));
}

#[test]
fn mlp_blobs_determinism_and_validation() {
    let train = blobs(40, 8, 6.0, 5, "d");
    let test = blobs(40, 8, 6.0, 6, "e");
    let arch = Architecture::mlp(MlpConfig { train: fast(20, 2), ..Default::default() }, 8).unwrap();
    let a = NetClassifier::train(arch.clone(), &Samples::from_features(&train).unwrap(), None).unwrap();
    let b = NetClassifier::train(arch, &Samples::from_features(&train).unwrap(), None).unwrap();
    assert_eq!(a.net.state("n"), b.net.state("n"));
    let s = Samples::from_features(&test).unwrap();
    assert_eq!(accuracy(&a.predict(&s).unwrap(), &s.rows), 1.0);
    assert!(Architecture::mlp(MlpConfig { hidden: vec![], ..Default::default() }, 8).is_err());
}

#[test]
fn training_ignores_input_row_order() {
    let train = blobs(20, 8, 3.0, 7, "f");
    let mut perm = train.clone();
    let n = perm.n_rows();
    let order: Vec<usize> = (0..n).rev().collect();
    perm.values = order.iter().flat_map(|&i| train.row(i).to_vec()).collect();
    perm.rows = order.iter().map(|&i| train.rows[i].clone()).collect();
    let arch = Architecture::mlp(MlpConfig { train: fast(5, 3), ..Default::default() }, 8).unwrap();
    let a = NetClassifier::train(arch.clone(), &Samples::from_features(&train).unwrap(), None).unwrap();
    let b = NetClassifier::train(arch, &Samples::from_features(&perm).unwrap(), None).unwrap();
    assert_eq!(a.net.state("n"), b.net.state("n"));
}

#[test]
fn cnn1d_shapes_and_minimum_length() {
    let f = blobs(5, 64, 2.0, 8, "g");
    let model = NetClassifier::untrained(Architecture::cnn1d(Cnn1dConfig::default(), 64).unwrap());
    let mut dup = f.clone();
    let first = f.row(0).to_vec();
    dup.values[64..128].copy_from_slice(&first);
    let s = Samples::from_features(&dup).unwrap();
    let p = model.predict(&s).unwrap();
    assert_eq!(p.len(), 10);
    let i0 = s.rows.iter().position(|r| r == &dup.rows[0]).unwrap();
    let i1 = s.rows.iter().position(|r| r == &dup.rows[1]).unwrap();
    assert_eq!(p[i0], p[i1]);
    assert_eq!(model.predict(&s).unwrap(), p);
    assert!(matches!(Architecture::cnn1d(Cnn1dConfig::default(), 4), Err(Error::TooShort { needed: 32, have: 4 })));
    assert!(Architecture::cnn1d(Cnn1dConfig { drop1: 1.0, ..Default::default() }, 64).is_err());
}

#[test]
fn cnn1d_loss_decreases_over_first_steps() {
    let f = blobs(16, 64, 3.0, 9, "h");
    let s = Samples::from_features(&f).unwrap();
    let labels: Vec<Label> = s.rows.iter().map(|r| r.label).collect();
    let x = Tensor::from_vec([s.len(), 1, 1, 64], s.data.clone());
    for seed in 0..3 {
        let arch = Architecture::cnn1d(Cnn1dConfig { drop1: 0.0, drop2: 0.0, train: fast(1, seed), ..Default::default() }, 64).unwrap();
        let mut model = NetClassifier::untrained(arch);
        let mut opt = Adam::new(AdamConfig::default());
        let mut rng = named_stream(seed, "drop");
        let mut losses = Vec::new();
        for _ in 0..6 {
            let logits = model.net.forward(x.clone(), &mut rng);
            let (loss, grad) = cross_entropy(&logits.data, &labels);
            losses.push(loss);
            model.net.backward(Tensor::from_vec(logits.shape, grad));
            opt.step(model.net.params_mut());
        }
        assert!(losses[5] < losses[0], "seed {seed}: {losses:?}");
    }
}

#[test]
fn cnn1d_separable_and_null_model() {
    let train = blobs(60, 64, 1.5, 10, "i");
    let val = blobs(30, 64, 1.5, 11, "j");
    let cfg = Cnn1dConfig { train: TrainConfig { early_stop_patience: 5, ..fast(30, 4) }, ..Default::default() };
    let arch = Architecture::cnn1d(cfg, 64).unwrap();
    let (ts, vs) = (Samples::from_features(&train).unwrap(), Samples::from_features(&val).unwrap());
    let model = NetClassifier::train(arch.clone(), &ts, Some(&vs)).unwrap();
    assert!(accuracy(&model.predict(&vs).unwrap(), &vs.rows) >= 0.95);

    let mut shuffled = train.clone();
    let mut rng = named_stream(12, "perm");
    let mut labels: Vec<Label> = shuffled.rows.iter().map(|r| r.label).collect();
    labels.shuffle(&mut rng);
    for (r, l) in shuffled.rows.iter_mut().zip(labels) {
        r.label = l;
    }
    let null = NetClassifier::train(arch, &Samples::from_features(&shuffled).unwrap(), None).unwrap();
    let acc = accuracy(&null.predict(&vs).unwrap(), &vs.rows);
    assert!((acc - 0.5).abs() <= 0.15, "null accuracy {acc}");
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let f = blobs(20, 64, 3.0, 13, "k");
    let s = Samples::from_features(&f).unwrap();
    let cnn = NetClassifier::train(Architecture::cnn1d(Cnn1dConfig { train: fast(2, 1), ..Default::default() }, 64).unwrap(), &s, None).unwrap();
    let svm = train_svm_rbf(&s, None, &SvmConfig { c_grid: vec![1.0], gamma_factors: vec![1.0], ..Default::default() }).unwrap();
    for (name, model) in [("cnn", ClassifierModel::Net(cnn)), ("svm", ClassifierModel::Svm(svm))] {
        let path = dir.path().join(format!("{name}.ckpt"));
        let d1 = save_classifier(&path, &model).unwrap();
        let loaded = load_classifier(&path).unwrap();
        assert_eq!(loaded.kind(), model.kind());
        assert_eq!(loaded.predict(ModelInput::Features(&f)).unwrap(), model.predict(ModelInput::Features(&f)).unwrap());
        assert_eq!(save_classifier(&path, &loaded).unwrap(), d1);
    }
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a tar archive at all").unwrap();
    assert!(load_classifier(&junk).is_err());
}
