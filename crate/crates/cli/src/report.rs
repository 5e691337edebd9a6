//! Run summaries rebuilt from the persisted artifacts of a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use eegvae_core::evaluation::{mann_whitney_u, MwuResult, ScoreTable, Summary};
use eegvae_core::io::{atomic_write, json_digest, read_json, sha256_file, write_json};
use serde::{Deserialize, Serialize};

use crate::config::{DiScope, Pipeline};
use crate::error::{Error, Result};
use crate::pipeline::{DiSummary, PatternSummary, RunManifest, RUN_MANIFEST};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineScores {
    pub pipeline: String,
    pub epoch_level: Summary,
    pub subject_level: Summary,
    pub fold_epoch_accuracy: Vec<f64>,
    pub fold_subject_accuracy: Vec<f64>,
    pub ties: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub subject_level: MwuResult,
    pub epoch_level: MwuResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpurityRow {
    pub scheme: String,
    pub scope: DiScope,
    pub mean_di: f64,
    pub first_quantile: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_digest: String,
    pub global_vae: bool,
    pub pipelines: Vec<PipelineScores>,
    pub comparisons: Vec<Comparison>,
    pub impurity: Vec<ImpurityRow>,
    pub spatial_ranking: Option<Vec<String>>,
    /// Stage artifact digests and run-file digests every number derives from.
    pub artifacts: BTreeMap<String, String>,
    /// Wall-clock seconds per stage; not part of the digest.
    pub timings_s: BTreeMap<String, f64>,
    pub digest: String,
}

impl RunReport {
    pub fn compute_digest(&self) -> String {
        let mut copy = self.clone();
        copy.timings_s.clear();
        copy.digest.clear();
        json_digest(&copy)
    }

    pub fn scores(&self, pipeline: Pipeline) -> Option<&PipelineScores> {
        self.pipelines.iter().find(|p| p.pipeline == pipeline.name())
    }

    pub fn impurity(&self, scheme: &str) -> Option<&ImpurityRow> {
        self.impurity.iter().find(|r| r.scheme == scheme)
    }
}

fn read_verified<T: serde::de::DeserializeOwned>(dir: &Path, manifest: &RunManifest, rel: &str) -> Result<T> {
    let path = dir.join(rel);
    let expected = manifest
        .files
        .get(rel)
        .ok_or_else(|| Error::Incomplete { path: dir.to_path_buf(), reason: format!("{rel} is not listed in {RUN_MANIFEST}") })?;
    let actual = sha256_file(&path).map_err(|_| Error::Integrity { path: path.clone(), reason: "missing".into() })?;
    if &actual != expected {
        return Err(Error::Integrity { path, reason: format!("sha256 {actual}, run manifest says {expected}") });
    }
    read_json(&path).map_err(|e| Error::Integrity { path: dir.join(rel), reason: e.to_string() })
}

/// Rebuilds the run summary from `run_dir`, writing `report.json` and
/// `report.txt` next to the artifacts.
pub fn report(run_dir: &Path) -> Result<RunReport> {
    let manifest_path = run_dir.join(RUN_MANIFEST);
    if !manifest_path.exists() {
        return Err(Error::Incomplete { path: run_dir.to_path_buf(), reason: format!("no {RUN_MANIFEST}") });
    }
    let manifest: RunManifest = read_json(&manifest_path)?;

    let mut pipelines = Vec::new();
    for p in &manifest.pipelines {
        let stored: ScoreTable = read_verified(run_dir, &manifest, &format!("scores/{p}.json"))?;
        if stored.folds.is_empty() {
            return Err(Error::Incomplete { path: run_dir.join(format!("scores/{p}.json")), reason: "no folds".into() });
        }
        let t = ScoreTable::from_folds(stored.pipeline, stored.folds);
        pipelines.push(PipelineScores {
            fold_epoch_accuracy: t.epoch_scores(),
            fold_subject_accuracy: t.subject_scores(),
            pipeline: t.pipeline,
            epoch_level: t.epoch_level,
            subject_level: t.subject_level,
            ties: t.ties,
        });
    }

    let mut comparisons = Vec::new();
    for i in 0..pipelines.len() {
        for j in i + 1..pipelines.len() {
            let (a, b) = (&pipelines[i], &pipelines[j]);
            comparisons.push(Comparison {
                a: a.pipeline.clone(),
                b: b.pipeline.clone(),
                subject_level: mann_whitney_u(&a.fold_subject_accuracy, &b.fold_subject_accuracy)?,
                epoch_level: mann_whitney_u(&a.fold_epoch_accuracy, &b.fold_epoch_accuracy)?,
            });
        }
    }

    let mut impurity = Vec::new();
    for scheme in ["vae", "eegnet"] {
        let rel = format!("impurity/{scheme}.json");
        if manifest.files.contains_key(&rel) {
            let s: DiSummary = read_verified(run_dir, &manifest, &rel)?;
            let first_quantile = s.reports.first().map(|r| r.first_quantile_values()).unwrap_or_default();
            impurity.push(ImpurityRow { scheme: s.scheme, scope: s.scope, mean_di: s.mean_di, first_quantile });
        }
    }

    let spatial_ranking = if manifest.files.contains_key("patterns.json") {
        let p: PatternSummary = read_verified(run_dir, &manifest, "patterns.json")?;
        Some(p.ranking)
    } else {
        None
    };

    let mut artifacts = manifest.artifacts.clone();
    for (rel, digest) in &manifest.files {
        artifacts.insert(format!("file:{rel}"), digest.clone());
    }
    let mut r = RunReport {
        config_digest: manifest.config_digest.clone(),
        global_vae: manifest.global_vae,
        pipelines,
        comparisons,
        impurity,
        spatial_ranking,
        artifacts,
        timings_s: manifest.timings_s.clone(),
        digest: String::new(),
    };
    r.digest = r.compute_digest();
    write_json(&run_dir.join("report.json"), &r)?;
    atomic_write(&run_dir.join("report.txt"), render_text(&r).as_bytes())?;
    Ok(r)
}

pub fn render_text(r: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Test scores (mean accuracy ± std over folds / std over subjects)");
    let _ = writeln!(s, "{:<12} {:>28} {:>28}", "pipeline", "epoch level", "subject level");
    for p in &r.pipelines {
        let cell = |x: &Summary| format!("{:.3} ± {:.3} / {:.3}", x.mean, x.std_over_folds, x.std_over_subjects);
        let _ = writeln!(s, "{:<12} {:>28} {:>28}", p.pipeline, cell(&p.epoch_level), cell(&p.subject_level));
    }
    if !r.comparisons.is_empty() {
        let _ = writeln!(s, "\nMann-Whitney U on per-fold accuracies (two-sided)");
        for c in &r.comparisons {
            let _ = writeln!(
                s,
                "{} vs {}: subject level U={:.1} p={:.4} ({:?}); epoch level U={:.1} p={:.4} ({:?})",
                c.a, c.b, c.subject_level.u_a, c.subject_level.p_two_sided, c.subject_level.method, c.epoch_level.u_a,
                c.epoch_level.p_two_sided, c.epoch_level.method
            );
        }
    }
    if !r.impurity.is_empty() {
        let _ = writeln!(s, "\nDichotomy impurity (lower is more separable)");
        for row in &r.impurity {
            let q: Vec<String> = row.first_quantile.iter().map(|v| format!("{v:.3}")).collect();
            let _ = writeln!(s, "{:<8} mean DI {:.4}  first quartile [{}]", row.scheme, row.mean_di, q.join(", "));
        }
    }
    if let Some(rank) = &r.spatial_ranking {
        let _ = writeln!(s, "\nChannels by obese/lean spatial-pattern difference: {}", rank.join(" "));
    }
    let _ = writeln!(s, "\nreport digest {}", r.digest);
    s
}
