mod common;

use std::fs;

use common::tiny_config;
use eegvae_cli::pipeline::RunManifest;
use eegvae_cli::{report, run, Error, ExperimentConfig, Pipeline, Stage};
use eegvae_core::io::read_json;

#[test]
fn full_run_writes_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&tiny_config(), dir.path(), Stage::Report).unwrap().expect("report");
    for f in [
        "config.toml",
        "folds.json",
        "scores/vae+cnn1d.json",
        "scores/raw+eegnet.json",
        "impurity/vae.json",
        "impurity/eegnet.json",
        "impurity/first_quantile.txt",
        "patterns.json",
        "figures/tsne_vae_class.svg",
        "figures/tsne_eegnet_subjects.svg",
        "figures/topomap_difference.svg",
        "run.json",
        "report.json",
        "report.txt",
    ] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    assert_eq!(r.pipelines.len(), 2);
    assert_eq!(r.comparisons.len(), 1);
    for p in &r.pipelines {
        assert_eq!(p.fold_subject_accuracy.len(), 3);
        assert!(p.fold_subject_accuracy.iter().all(|a| (0.0..=1.0).contains(a)));
    }
    let text = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(text.contains("Mann-Whitney") && text.contains("raw+eegnet"), "{text}");
}

#[test]
fn rerun_hits_the_cache_and_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let first = run(&cfg, dir.path(), Stage::Report).unwrap().unwrap();
    let second = run(&cfg, dir.path(), Stage::Report).unwrap().unwrap();
    assert_eq!(first.digest, second.digest);
    let manifest: RunManifest = read_json(&dir.path().join("run.json")).unwrap();
    assert!(!manifest.cache_hits.is_empty());
    let misses: Vec<_> = manifest.cache_hits.iter().filter(|(_, hit)| !**hit).collect();
    assert!(misses.is_empty(), "recomputed: {misses:?}");
}

#[test]
fn changing_a_classifier_setting_keeps_the_vae() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    run(&cfg, dir.path(), Stage::Evaluate).unwrap();
    cfg.cnn1d.train.learning_rate = 2e-3;
    run(&cfg, dir.path(), Stage::Evaluate).unwrap();
    let manifest: RunManifest = read_json(&dir.path().join("run.json")).unwrap();
    let hit = |k: &str| manifest.cache_hits[k];
    assert!(hit("train-vae/fold00"));
    assert!(!hit("train-clf/vae+cnn1d/fold00"));
    assert!(hit("train-clf/raw+eegnet/fold00"));
}

#[test]
fn single_pipeline_report_has_no_test_section() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { pipelines: vec![Pipeline::VaeSvm], ..tiny_config() };
    let r = run(&cfg, dir.path(), Stage::Report).unwrap().unwrap();
    assert!(r.comparisons.is_empty());
    let text = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(!text.contains("Mann-Whitney"), "{text}");
}

#[test]
fn corrupted_scores_fail_with_the_file_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { pipelines: vec![Pipeline::VaeMlp], ..tiny_config() };
    run(&cfg, dir.path(), Stage::Report).unwrap();
    let path = dir.path().join("scores/vae+mlp.json");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("0.", "1.", 1)).unwrap();
    let err = report(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Integrity { .. }), "{err}");
    assert!(err.to_string().contains("vae+mlp.json"), "{err}");
}

#[test]
fn report_on_an_unfinished_run_is_incomplete() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(report(dir.path()), Err(Error::Incomplete { .. })));
    run(&tiny_config(), dir.path(), Stage::Preprocess).unwrap();
    assert!(report(dir.path()).is_err());
}

#[test]
fn unknown_pipeline_is_a_config_error() {
    let err = ExperimentConfig::from_toml("pipelines = [\"raw+svm\"]").unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("raw+svm"));
}

#[test]
fn global_vae_trains_once() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { global_vae: true, pipelines: vec![Pipeline::VaeSvm], ..tiny_config() };
    let r = run(&cfg, dir.path(), Stage::Report).unwrap().unwrap();
    assert!(r.global_vae);
    let manifest: RunManifest = read_json(&dir.path().join("run.json")).unwrap();
    let vaes: Vec<_> = manifest.artifacts.keys().filter(|k| k.starts_with("train-vae")).collect();
    assert_eq!(vaes.len(), 1, "{vaes:?}");
}
