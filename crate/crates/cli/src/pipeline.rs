//! Stage orchestration for one experiment.
//!
//! Corpus and preprocessing run once; everything downstream runs per fold in
//! a worker pool: VAE training on the fold's training subjects, feature
//! extraction for every subject, classifier training on training-subject
//! rows (validation subjects drive early stopping), and scoring on the
//! held-out subjects. Pooled outputs (score tables, impurity, spatial
//! patterns, figures) are written to the run directory and listed with their
//! digests in `run.json`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use eegvae_core::evaluation::{assert_no_leakage, make_subject_folds, score_fold, FoldScore, FoldSplit, ScoreTable};
use eegvae_core::impurity::{dichotomy_impurity, quantile_comparison, DIReport};
use eegvae_core::io::{atomic_write, f32_to_le_bytes, json_digest, read_json, sha256_file, sha256_hex, to_json_bytes, write_json};
use eegvae_core::preprocess::{preprocess_recording, read_epoch_sets, write_epoch_sets, NormalizeMode, PreprocessConfig};
use eegvae_core::synth::{generate_corpus, read_manifest, read_recording, CorpusManifest};
use eegvae_core::{EpochSet, FeatureMatrix, Label};
use eegvae_nn::checkpoint::{load_classifier, load_vae, save_classifier, save_vae};
use eegvae_nn::classifier::{Architecture, ClassifierModel, ModelInput, NetClassifier, Samples};
use eegvae_nn::svm::train_svm_rbf;
use eegvae_nn::vae::{train_vae, SpatialPatterns, UnlabeledEpochs};
use eegvae_nn::TrainedVae;
use eegvae_viz::{pick_subjects, render_scatter, render_topomap, tsne_project, write_coordinates_csv, ColorBy};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::{inputs, Artifact, Store};
use crate::config::{DiScope, ExperimentConfig, Pipeline, ProjectionRows, RawInput};
use crate::error::{Error, Result};
use crate::features::{read_features, write_features};
use crate::report::{report, RunReport};

pub const RUN_MANIFEST: &str = "run.json";

/// Stages in dependency order; subcommands run up to and including one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Preprocess,
    TrainVae,
    Extract,
    TrainClf,
    Evaluate,
    Impurity,
    Visualize,
    Report,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub digest: String,
    pub manifest: CorpusManifest,
}

#[derive(Debug, Clone)]
pub struct Epochs {
    pub artifact: Artifact,
    pub sets: Vec<EpochSet>,
}

impl Epochs {
    pub fn subset(&self, subjects: &[String]) -> Vec<EpochSet> {
        let keep: HashSet<&str> = subjects.iter().map(|s| s.as_str()).collect();
        self.sets.iter().filter(|s| keep.contains(s.subject_id.as_str())).cloned().collect()
    }
}

pub struct Vae {
    pub artifact: Artifact,
    pub model: TrainedVae,
}

#[derive(Debug, Clone)]
pub struct Features {
    pub artifact: Artifact,
    pub matrix: FeatureMatrix,
}

/// What one pipeline produced on one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub pipeline: Pipeline,
    pub score: FoldScore,
    pub model_digest: String,
    pub evaluation_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub epoch_index: usize,
    pub label: Label,
    pub probs: [f64; 2],
}

#[derive(Debug, Default)]
struct FoldResult {
    fold_id: usize,
    vae_digest: Option<String>,
    features: Option<Features>,
    outcomes: Vec<FoldOutcome>,
    /// Held-out EEGNet penultimate activations.
    penultimate: Option<Features>,
}

/// Per-fold digest bookkeeping and where a stage stopped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub pipelines: Vec<Pipeline>,
    pub global_vae: bool,
    /// Run-directory files with their SHA-256, relative to the run directory.
    pub files: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    pub cache_hits: BTreeMap<String, bool>,
    pub timings_s: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiSummary {
    pub scheme: String,
    pub scope: DiScope,
    pub mean_di: f64,
    pub reports: Vec<DIReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSummary {
    pub folds: usize,
    pub patterns: SpatialPatterns,
    /// Channels by descending difference.
    pub ranking: Vec<String>,
}

pub struct Runner {
    cfg: ExperimentConfig,
    user_cfg: ExperimentConfig,
    out: PathBuf,
    store: Store,
    pool: rayon::ThreadPool,
    manifest: Mutex<RunManifest>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

impl Runner {
    pub fn new(cfg: &ExperimentConfig, out: &Path) -> Result<Runner> {
        cfg.validate()?;
        fs::create_dir_all(out).map_err(io_err(out))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.jobs)))?;
        let resolved = cfg.resolved();
        Ok(Runner {
            manifest: Mutex::new(RunManifest {
                config_digest: resolved.digest(),
                pipelines: cfg.pipelines.clone(),
                global_vae: cfg.global_vae,
                ..Default::default()
            }),
            cfg: resolved,
            user_cfg: cfg.clone(),
            out: out.to_path_buf(),
            store: Store::new(out.join("cache")),
            pool,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    fn timed<T>(&self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let r = f();
        let dt = start.elapsed().as_secs_f64();
        *self.manifest.lock().expect("manifest lock").timings_s.entry(name.to_string()).or_default() += dt;
        r
    }

    fn record(&self, name: impl Into<String>, a: &Artifact) {
        let mut m = self.manifest.lock().expect("manifest lock");
        let name = name.into();
        m.artifacts.insert(name.clone(), a.digest.clone());
        m.cache_hits.insert(name, a.cache_hit);
    }

    /// Writes a file into the run directory and lists it in the manifest.
    fn publish(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(rel);
        atomic_write(&path, bytes)?;
        let digest = sha256_file(&path)?;
        self.manifest.lock().expect("manifest lock").files.insert(rel.to_string(), digest);
        Ok(())
    }

    fn publish_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        self.publish(rel, &to_json_bytes(value))
    }

    pub fn corpus(&self) -> Result<Corpus> {
        self.timed("synth", || match (&self.cfg.corpus.synth, &self.cfg.corpus.path) {
            (Some(synth), _) => {
                let a = self.store.stage("synth", 3, synth, BTreeMap::new(), |d| generate_corpus(synth, d).map(|_| ()).map_err(Error::from))?;
                self.record("synth", &a);
                let manifest = read_manifest(&a.dir)?;
                Ok(Corpus { dir: a.dir, digest: a.digest, manifest })
            }
            (None, Some(path)) => {
                let manifest = read_manifest(path)?;
                Ok(Corpus { dir: path.clone(), digest: json_digest(&manifest), manifest })
            }
            (None, None) => Err(Error::Config("no corpus configured".into())),
        })
    }

    pub fn preprocess(&self, corpus: &Corpus, params: &PreprocessConfig) -> Result<Epochs> {
        let name = match params.normalize {
            NormalizeMode::None => "preprocess-raw",
            _ => "preprocess",
        };
        self.timed(name, || {
            let a = self.store.stage("preprocess", 1, params, inputs([("corpus", corpus.digest.as_str())]), |d| {
                let sets = corpus
                    .manifest
                    .subjects
                    .par_iter()
                    .map(|entry| {
                        let rec = read_recording(&corpus.dir, &corpus.manifest, entry)?;
                        preprocess_recording(&rec, params)
                    })
                    .collect::<eegvae_core::Result<Vec<_>>>()?;
                write_epoch_sets(d, &sets, params)?;
                Ok(())
            })?;
            self.record(name, &a);
            let (_, mut sets) = read_epoch_sets(&a.dir)?;
            sets.sort_by(|x, y| x.subject_id.cmp(&y.subject_id));
            Ok(Epochs { artifact: a, sets })
        })
    }

    pub fn folds(&self, corpus: &Corpus) -> Result<Vec<FoldSplit>> {
        let seed = self.cfg.fold_seed();
        let labels = corpus.manifest.labels();
        let a = self.store.stage("folds", 1, &seed, inputs([("subjects", json_digest(&labels).as_str())]), |d| {
            let folds = make_subject_folds(&labels, seed)?;
            write_json(&d.join("folds.json"), &folds)?;
            Ok(())
        })?;
        self.record("folds", &a);
        Ok(read_json(&a.path("folds.json"))?)
    }

    pub fn train_vae(&self, epochs: &Epochs, train: &[String], validation: &[String]) -> Result<Vae> {
        self.timed("train-vae", || {
            let key_inputs = inputs([
                ("epochs", epochs.artifact.digest.as_str()),
                ("train", json_digest(&train).as_str()),
                ("validation", json_digest(&validation).as_str()),
            ]);
            let a = self.store.stage("train-vae", 1, &self.cfg.vae, key_inputs, |d| {
                let train_sets = epochs.subset(train);
                let val_sets = epochs.subset(validation);
                let t = UnlabeledEpochs::from_sets(&train_sets)?;
                let v = if val_sets.is_empty() { None } else { Some(UnlabeledEpochs::from_sets(&val_sets)?) };
                let model = train_vae(&t, v.as_ref(), &self.cfg.vae)?;
                save_vae(&d.join("vae.ckpt"), &model)?;
                Ok(())
            })?;
            let model = load_vae(&a.path("vae.ckpt"))?;
            Ok(Vae { artifact: a, model })
        })
    }

    pub fn extract(&self, vae: &Vae, epochs: &Epochs) -> Result<Features> {
        self.timed("extract", || {
            let key_inputs = inputs([("vae", vae.artifact.digest.as_str()), ("epochs", epochs.artifact.digest.as_str())]);
            let a = self.store.stage("extract", 1, &(), key_inputs, |d| {
                let parts = epochs.sets.iter().map(|es| vae.model.extract_features(es)).collect::<eegvae_nn::Result<Vec<_>>>()?;
                write_features(d, &FeatureMatrix::concat(&parts)?, &vae.artifact.digest)
            })?;
            let (_, matrix) = read_features(&a.dir)?;
            Ok(Features { artifact: a, matrix })
        })
    }

    fn classifier_config(&self, p: Pipeline) -> serde_json::Value {
        match p {
            Pipeline::VaeCnn1d => serde_json::to_value(&self.cfg.cnn1d),
            Pipeline::VaeSvm => serde_json::to_value(&self.cfg.svm),
            Pipeline::VaeMlp => serde_json::to_value(&self.cfg.mlp),
            Pipeline::RawEegnet => serde_json::to_value((&self.cfg.eegnet, self.cfg.raw_input)),
        }
        .expect("configs serialize")
    }

    /// Trains one pipeline's classifier on a fold. For VAE pipelines `features`
    /// holds every subject's rows; for the raw baseline `raw` holds the epochs.
    fn train_classifier(&self, p: Pipeline, fold: &FoldSplit, features: Option<&Features>, raw: Option<&Epochs>) -> Result<(Artifact, ClassifierModel)> {
        let data_digest = match (features, raw) {
            (Some(f), _) if p.uses_vae() => f.artifact.digest.clone(),
            (_, Some(e)) if !p.uses_vae() => e.artifact.digest.clone(),
            _ => return Err(Error::Config(format!("{p}: missing input data"))),
        };
        let key_inputs = inputs([("data", data_digest.as_str()), ("fold", json_digest(fold).as_str())]);
        let config = (p, self.classifier_config(p));
        let a = self.store.stage("train-clf", 1, &config, key_inputs, |d| {
            let (train, val) = match p {
                Pipeline::RawEegnet => {
                    let e = raw.expect("checked above");
                    (Samples::from_epochs(&e.subset(&fold.train_subjects))?, Samples::from_epochs(&e.subset(&fold.validation_subjects))?)
                }
                _ => {
                    let f = &features.expect("checked above").matrix;
                    let pick = |s: &[String]| f.select_subjects(&s.iter().cloned().collect());
                    (Samples::from_features(&pick(&fold.train_subjects))?, Samples::from_features(&pick(&fold.validation_subjects))?)
                }
            };
            guard_classifier_inputs(fold, &train, &val)?;
            let model = match p {
                Pipeline::VaeSvm => ClassifierModel::Svm(train_svm_rbf(&train, Some(&val), &self.cfg.svm)?),
                _ => {
                    let [_, h, w] = train.item;
                    let arch = match p {
                        Pipeline::VaeCnn1d => Architecture::cnn1d(self.cfg.cnn1d.clone(), w)?,
                        Pipeline::VaeMlp => Architecture::mlp(self.cfg.mlp.clone(), w)?,
                        _ => {
                            let rate = raw.expect("checked above").sets[0].rate_hz;
                            Architecture::eegnet(self.cfg.eegnet.clone(), h, w, rate)?
                        }
                    };
                    ClassifierModel::Net(NetClassifier::train(arch, &train, Some(&val))?)
                }
            };
            save_classifier(&d.join("model.ckpt"), &model)?;
            Ok(())
        })?;
        let model = load_classifier(&a.path("model.ckpt"))?;
        Ok((a, model))
    }

    fn evaluate(
        &self,
        p: Pipeline,
        fold: &FoldSplit,
        model: (&Artifact, &ClassifierModel),
        features: Option<&Features>,
        raw: Option<&Epochs>,
    ) -> Result<(Artifact, FoldOutcome, Option<Features>)> {
        let (model_artifact, model) = model;
        let data_digest = if p.uses_vae() { features.map(|f| &f.artifact.digest) } else { raw.map(|e| &e.artifact.digest) }
            .ok_or_else(|| Error::Config(format!("{p}: missing input data")))?
            .clone();
        let key_inputs = inputs([
            ("model", model_artifact.digest.as_str()),
            ("data", data_digest.as_str()),
            ("fold", json_digest(fold).as_str()),
        ]);
        let a = self.store.stage("evaluate", 1, &p, key_inputs, |d| {
            let test_sets;
            let test_features;
            let input = if p.uses_vae() {
                test_features = features.expect("checked").matrix.select_subjects(&fold.test_subjects.iter().cloned().collect());
                ModelInput::Features(&test_features)
            } else {
                test_sets = raw.expect("checked").subset(&fold.test_subjects);
                ModelInput::Epochs(&test_sets)
            };
            let (rows, probs) = model.predict(input)?;
            let predictions: Vec<Prediction> = rows
                .iter()
                .zip(&probs)
                .map(|(r, p)| Prediction { subject_id: r.subject_id.clone(), epoch_index: r.epoch_index, label: r.label, probs: *p })
                .collect();
            let mut by_subject: BTreeMap<String, Vec<[f64; 2]>> = BTreeMap::new();
            for pr in &predictions {
                by_subject.entry(pr.subject_id.clone()).or_default().push(pr.probs);
            }
            let truth: BTreeMap<String, Label> = rows.iter().map(|r| (r.subject_id.clone(), r.label)).collect();
            let expected: BTreeSet<&String> = fold.test_subjects.iter().collect();
            if truth.keys().collect::<BTreeSet<_>>() != expected {
                return Err(Error::Leakage(format!("fold {} scored on subjects other than its test set", fold.fold_id)));
            }
            let score = score_fold(fold.fold_id, &by_subject, &truth)?;
            write_json(&d.join("predictions.json"), &predictions)?;
            write_json(&d.join("score.json"), &score)?;
            if let (ClassifierModel::Net(net), ModelInput::Epochs(sets)) = (model, input) {
                let pen = net.penultimate(&Samples::from_epochs(sets)?)?;
                write_features(d, &pen, &model_artifact.digest)?;
            }
            Ok(())
        })?;
        let score: FoldScore = read_json(&a.path("score.json"))?;
        let penultimate = if a.path(crate::features::FEATURES_JSON).exists() {
            let (_, matrix) = read_features(&a.dir)?;
            Some(Features { artifact: a.clone(), matrix })
        } else {
            None
        };
        let outcome = FoldOutcome { pipeline: p, score, model_digest: model_artifact.digest.clone(), evaluation_digest: a.digest.clone() };
        Ok((a, outcome, penultimate))
    }

    fn run_fold(&self, fold: &FoldSplit, until: Stage, epochs: &Epochs, raw: Option<&Epochs>, global: Option<&Vae>) -> Result<FoldResult> {
        let mut result = FoldResult { fold_id: fold.fold_id, ..Default::default() };
        let tag = |s: &str| format!("{s}/fold{:02}", fold.fold_id);

        let mut own = None;
        if self.cfg.needs_vae() && global.is_none() {
            assert_no_leakage(fold, fold.train_subjects.iter().map(|s| s.as_str())).map_err(|e| Error::Leakage(e.to_string()))?;
            let v = self.train_vae(epochs, &fold.train_subjects, &fold.validation_subjects)?;
            self.record(tag("train-vae"), &v.artifact);
            own = Some(v);
        }
        let vae = if self.cfg.needs_vae() { own.as_ref().or(global) } else { None };
        result.vae_digest = vae.map(|v| v.artifact.digest.clone());
        if until < Stage::Extract {
            return Ok(result);
        }
        if let Some(vae) = vae {
            let f = self.extract(vae, epochs)?;
            self.record(tag("extract"), &f.artifact);
            result.features = Some(f);
        }
        if until < Stage::TrainClf {
            return Ok(result);
        }
        for &p in &self.cfg.pipelines {
            let (ma, model) = self.timed(&format!("train-clf/{p}"), || self.train_classifier(p, fold, result.features.as_ref(), raw))?;
            self.record(tag(&format!("train-clf/{p}")), &ma);
            if until < Stage::Evaluate {
                continue;
            }
            let (ea, outcome, pen) = self.timed("evaluate", || self.evaluate(p, fold, (&ma, &model), result.features.as_ref(), raw))?;
            self.record(tag(&format!("evaluate/{p}")), &ea);
            if pen.is_some() {
                result.penultimate = pen;
            }
            result.outcomes.push(outcome);
        }
        Ok(result)
    }

    /// Runs every stage up to and including `until`. Returns the report when
    /// `until` is [`Stage::Report`].
    pub fn execute(&self, until: Stage) -> Result<Option<RunReport>> {
        self.publish("config.toml", self.user_cfg.to_toml().as_bytes())?;
        let corpus = self.corpus()?;
        if until == Stage::Synth {
            return self.finish();
        }
        let epochs = self.preprocess(&corpus, &self.cfg.preprocess)?;
        let raw = if self.cfg.pipelines.contains(&Pipeline::RawEegnet) {
            match self.cfg.raw_input {
                RawInput::Normalized => Some(epochs.clone()),
                RawInput::Microvolts => {
                    Some(self.preprocess(&corpus, &PreprocessConfig { normalize: NormalizeMode::None, ..self.cfg.preprocess.clone() })?)
                }
            }
        } else {
            None
        };
        if until == Stage::Preprocess {
            return self.finish();
        }
        let folds = self.folds(&corpus)?;
        self.publish_json("folds.json", &folds)?;

        let global = if self.cfg.global_vae && self.cfg.needs_vae() {
            let all: Vec<String> = epochs.sets.iter().map(|s| s.subject_id.clone()).collect();
            log::warn!("global VAE: the feature extractor sees every subject, including held-out ones");
            let v = self.train_vae(&epochs, &all, &[])?;
            self.record("train-vae/global", &v.artifact);
            Some(v)
        } else {
            None
        };

        log::info!("running {} folds on {} worker(s)", folds.len(), self.cfg.jobs);
        let results: Vec<FoldResult> = self.pool.install(|| {
            folds.par_iter().map(|f| self.run_fold(f, until, &epochs, raw.as_ref(), global.as_ref())).collect::<Result<Vec<_>>>()
        })?;
        if until < Stage::Evaluate {
            return self.finish();
        }

        for &p in &self.cfg.pipelines {
            let fold_scores: Vec<FoldScore> =
                results.iter().flat_map(|r| r.outcomes.iter().filter(|o| o.pipeline == p).map(|o| o.score.clone())).collect();
            self.publish_json(&format!("scores/{p}.json"), &ScoreTable::from_folds(p.name(), fold_scores))?;
        }
        if until < Stage::Impurity {
            return self.finish();
        }

        self.timed("impurity", || self.impurity(&folds, &results))?;
        if self.cfg.spatial_patterns && self.cfg.needs_vae() {
            self.timed("patterns", || self.patterns(&epochs, &folds, global.as_ref()))?;
        }
        if until < Stage::Visualize {
            return self.finish();
        }
        if self.cfg.visualize.enabled {
            self.timed("visualize", || self.visualize(&folds, &results))?;
        }
        if until < Stage::Report {
            return self.finish();
        }
        self.finish()?;
        Ok(Some(report(&self.out)?))
    }

    fn finish(&self) -> Result<Option<RunReport>> {
        let manifest = self.manifest.lock().expect("manifest lock").clone();
        write_json(&self.out.join(RUN_MANIFEST), &manifest)?;
        Ok(None)
    }

    /// Held-out feature rows of every fold, for one feature scheme.
    fn held_out(&self, folds: &[FoldSplit], results: &[FoldResult], scheme: &str) -> Vec<FeatureMatrix> {
        results
            .iter()
            .filter_map(|r| {
                let fold = &folds[r.fold_id];
                let f = if scheme == "vae" { r.features.as_ref() } else { r.penultimate.as_ref() }?;
                Some(f.matrix.select_subjects(&fold.test_subjects.iter().cloned().collect()))
            })
            .collect()
    }

    fn impurity(&self, folds: &[FoldSplit], results: &[FoldResult]) -> Result<()> {
        let mut summaries = Vec::new();
        for scheme in ["vae", "eegnet"] {
            let parts = self.held_out(folds, results, scheme);
            if parts.is_empty() {
                continue;
            }
            let reports = match self.cfg.di_scope {
                DiScope::Pooled => {
                    let pooled = FeatureMatrix::concat(&parts)?;
                    vec![dichotomy_impurity(&pooled, &pooled.labels())?]
                }
                DiScope::PerFold => parts.iter().map(|f| dichotomy_impurity(f, &f.labels())).collect::<eegvae_core::Result<_>>()?,
            };
            let mean_di = reports.iter().map(|r| r.mean_di).sum::<f64>() / reports.len() as f64;
            let summary = DiSummary { scheme: scheme.to_string(), scope: self.cfg.di_scope, mean_di, reports };
            self.publish_json(&format!("impurity/{scheme}.json"), &summary)?;
            summaries.push(summary);
        }
        if let [a, b] = summaries.as_slice() {
            let cmp = quantile_comparison(&b.reports[0], &a.reports[0])?;
            self.publish("impurity/first_quantile.txt", cmp.to_table().as_bytes())?;
        }
        Ok(())
    }

    fn patterns(&self, epochs: &Epochs, folds: &[FoldSplit], global: Option<&Vae>) -> Result<()> {
        let vae_digests: Vec<String> = {
            let m = self.manifest.lock().expect("manifest lock");
            match global {
                Some(v) => vec![v.artifact.digest.clone()],
                None => folds.iter().filter_map(|f| m.artifacts.get(&format!("train-vae/fold{:02}", f.fold_id)).cloned()).collect(),
            }
        };
        let key_inputs = inputs([("vaes", json_digest(&vae_digests).as_str()), ("epochs", epochs.artifact.digest.as_str())]);
        let a = self.store.stage("patterns", 2, &(), key_inputs, |d| {
            let owned: Vec<TrainedVae> = match global {
                Some(_) => Vec::new(),
                None => folds
                    .iter()
                    .map(|f| Ok(self.train_vae(epochs, &f.train_subjects, &f.validation_subjects)?.model))
                    .collect::<Result<_>>()?,
            };
            let models: Vec<&TrainedVae> = match global {
                Some(v) => vec![&v.model],
                None => owned.iter().collect(),
            };
            let per_model = models.iter().map(|m| m.spatial_patterns(&epochs.sets)).collect::<eegvae_nn::Result<Vec<_>>>()?;
            let n = per_model.len() as f64;
            let avg = |pick: fn(&SpatialPatterns) -> &Vec<f64>| -> Vec<f64> {
                let mut acc = vec![0.0; per_model[0].channels.len()];
                for p in &per_model {
                    acc.iter_mut().zip(pick(p)).for_each(|(a, v)| *a += v / n);
                }
                acc
            };
            let lean = avg(|p| &p.lean);
            let obese = avg(|p| &p.obese);
            let difference: Vec<f64> = lean.iter().zip(&obese).map(|(l, o)| (o - l).abs()).collect();
            let channels = per_model[0].channels.clone();
            let mut order: Vec<usize> = (0..channels.len()).collect();
            order.sort_by(|&x, &y| difference[y].total_cmp(&difference[x]).then(x.cmp(&y)));
            let summary = PatternSummary {
                folds: per_model.len(),
                ranking: order.iter().map(|&i| channels[i].clone()).collect(),
                patterns: SpatialPatterns { channels, lean, obese, difference },
            };
            write_json(&d.join("patterns.json"), &summary)?;
            Ok(())
        })?;
        self.record("patterns", &a);
        let summary: PatternSummary = read_json(&a.path("patterns.json"))?;
        self.publish_json("patterns.json", &summary)
    }

    fn visualize(&self, folds: &[FoldSplit], results: &[FoldResult]) -> Result<()> {
        let vis = &self.cfg.visualize;
        let mut sets: Vec<(String, FeatureMatrix)> = Vec::new();
        if let Some(first) = results.first().and_then(|r| r.features.as_ref()) {
            let fm = match vis.rows {
                ProjectionRows::All => first.matrix.clone(),
                ProjectionRows::TestFolds => FeatureMatrix::concat(&self.held_out(folds, results, "vae"))?,
            };
            sets.push(("vae".into(), fm));
        }
        let pen = self.held_out(folds, results, "eegnet");
        if !pen.is_empty() {
            sets.push(("eegnet".into(), FeatureMatrix::concat(&pen)?));
        }
        let patterns: Option<PatternSummary> = {
            let p = self.out.join("patterns.json");
            if p.exists() {
                Some(read_json(&p)?)
            } else {
                None
            }
        };
        let feature_digests: Vec<(&String, String)> = sets.iter().map(|(n, f)| (n, matrix_digest(f))).collect();
        let key_inputs = inputs([("features", json_digest(&feature_digests).as_str()), ("patterns", json_digest(&patterns).as_str())]);
        let a = self.store.stage("visualize", 2, vis, key_inputs, |d| {
            for (name, fm) in &sets {
                let emb = tsne_project(fm, &vis.tsne)?;
                write_coordinates_csv(&emb, &d.join(format!("tsne_{name}.csv")))?;
                render_scatter(&emb, &ColorBy::Class, &format!("{name} features by class"), &d.join(format!("tsne_{name}_class.svg")))?;
                let subjects = pick_subjects(&emb.rows, vis.subjects_per_class, vis.tsne.seed)?;
                render_scatter(&emb, &ColorBy::Subjects(subjects), &format!("{name} features by subject"), &d.join(format!("tsne_{name}_subjects.svg")))?;
            }
            if let Some(p) = &patterns {
                let sp = &p.patterns;
                render_topomap(&sp.lean, &sp.channels, "lean channel importance", &d.join("topomap_lean.svg"))?;
                render_topomap(&sp.obese, &sp.channels, "obese channel importance", &d.join("topomap_obese.svg"))?;
                render_topomap(&sp.difference, &sp.channels, "absolute difference", &d.join("topomap_difference.svg"))?;
            }
            Ok(())
        })?;
        self.record("visualize", &a);
        for entry in fs::read_dir(&a.dir).map_err(io_err(&a.dir))? {
            let entry = entry.map_err(io_err(&a.dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name != crate::artifacts::SIDECAR {
                let bytes = fs::read(entry.path()).map_err(io_err(&entry.path()))?;
                self.publish(&format!("figures/{name}"), &bytes)?;
            }
        }
        Ok(())
    }
}

fn matrix_digest(f: &FeatureMatrix) -> String {
    json_digest(&(&f.rows, sha256_hex(&f32_to_le_bytes(&f.values))))
}

/// Leakage guard: training rows come only from training subjects and
/// validation rows only from validation subjects.
fn guard_classifier_inputs(fold: &FoldSplit, train: &Samples, val: &Samples) -> Result<()> {
    assert_no_leakage(fold, train.rows.iter().map(|r| r.subject_id.as_str())).map_err(|e| Error::Leakage(e.to_string()))?;
    let allowed: HashSet<&str> = fold.validation_subjects.iter().map(|s| s.as_str()).collect();
    if let Some(r) = val.rows.iter().find(|r| !allowed.contains(r.subject_id.as_str())) {
        return Err(Error::Leakage(format!("subject {} is not a validation subject of fold {}", r.subject_id, fold.fold_id)));
    }
    Ok(())
}

/// Runs `cfg` in `out` up to `until`.
pub fn run(cfg: &ExperimentConfig, out: &Path, until: Stage) -> Result<Option<RunReport>> {
    Runner::new(cfg, out)?.execute(until)
}
