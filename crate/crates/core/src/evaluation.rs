//! Subject-wise cross-validation, majority voting, scoring and the
//! Mann-Whitney U test.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::named_stream;
use crate::types::Label;

/// Subjects per class held out for testing (and for validation) per fold.
pub const HOLDOUT_PER_CLASS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub test_subjects: Vec<String>,
    pub validation_subjects: Vec<String>,
    pub train_subjects: Vec<String>,
}

impl FoldSplit {
    /// Fails if any subject occurs in more than one role.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in self.test_subjects.iter().chain(&self.validation_subjects).chain(&self.train_subjects) {
            if !seen.insert(s) {
                return Err(Error::Partition(format!("subject {s} leaks across roles in fold {}", self.fold_id)));
            }
        }
        Ok(())
    }

    pub fn train_set(&self) -> HashSet<String> {
        self.train_subjects.iter().cloned().collect()
    }
}

/// Runtime leakage guard: no subject of `used_for_training` may be a test or
/// validation subject of `fold`.
pub fn assert_no_leakage<'a>(fold: &FoldSplit, used_for_training: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let held: HashSet<&str> =
        fold.test_subjects.iter().chain(&fold.validation_subjects).map(|s| s.as_str()).collect();
    for s in used_for_training {
        if held.contains(s) {
            return Err(Error::Partition(format!(
                "held-out subject {s} used for training in fold {}",
                fold.fold_id
            )));
        }
    }
    Ok(())
}

/// Partitions subjects into folds with three lean and three obese test
/// subjects each; every subject is tested exactly once. Validation subjects
/// (three per class) are drawn per fold from the remaining subjects.
pub fn make_subject_folds(subjects: &[(String, Label)], seed: u64) -> Result<Vec<FoldSplit>> {
    let mut ids = BTreeSet::new();
    for (s, _) in subjects {
        if !ids.insert(s.as_str()) {
            return Err(Error::DuplicateSubject(s.clone()));
        }
    }
    let mut by_class: [Vec<String>; 2] = [Vec::new(), Vec::new()];
    for (s, l) in subjects {
        by_class[l.index()].push(s.clone());
    }
    let (n_lean, n_obese) = (by_class[0].len(), by_class[1].len());
    if n_lean != n_obese || n_lean == 0 || n_lean % HOLDOUT_PER_CLASS != 0 {
        return Err(Error::Partition(format!(
            "need equal class counts divisible by {HOLDOUT_PER_CLASS}, got {n_lean} lean / {n_obese} obese"
        )));
    }
    if n_lean < 2 * HOLDOUT_PER_CLASS {
        return Err(Error::Partition(format!(
            "validation needs {} more subjects per class after testing; need at least {} subjects in total",
            HOLDOUT_PER_CLASS,
            4 * HOLDOUT_PER_CLASS
        )));
    }
    let mut rng = named_stream(seed, "folds/order");
    for class in by_class.iter_mut() {
        class.sort();
        class.shuffle(&mut rng);
    }
    let k = n_lean / HOLDOUT_PER_CLASS;
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let block = f * HOLDOUT_PER_CLASS..(f + 1) * HOLDOUT_PER_CLASS;
        let mut test = Vec::new();
        let mut validation = Vec::new();
        let mut train = Vec::new();
        let mut vrng = named_stream(seed, &format!("folds/validation/{f}"));
        for class in &by_class {
            test.extend_from_slice(&class[block.clone()]);
            let mut rest: Vec<String> =
                class.iter().enumerate().filter(|(i, _)| !block.contains(i)).map(|(_, s)| s.clone()).collect();
            rest.shuffle(&mut vrng);
            validation.extend_from_slice(&rest[..HOLDOUT_PER_CLASS]);
            train.extend_from_slice(&rest[HOLDOUT_PER_CLASS..]);
        }
        train.sort();
        let fold = FoldSplit { fold_id: f, test_subjects: test, validation_subjects: validation, train_subjects: train };
        fold.check_disjoint()?;
        folds.push(fold);
    }
    Ok(folds)
}

/// Outcome of voting over one subject's epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub label: Label,
    pub lean_votes: usize,
    pub obese_votes: usize,
    pub mean_obese_prob: f64,
    pub tie: bool,
}

/// Each epoch votes for its strictly more probable class (exact 50/50
/// epochs abstain). Equal counts fall back to the mean class-1
/// probability, then to lean; equal counts always set `tie`.
pub fn majority_vote(epoch_probs: &[[f64; 2]]) -> Vote {
    let mut votes = [0usize; 2];
    let mut mean_obese = 0.0;
    for p in epoch_probs {
        if p[1] > p[0] {
            votes[1] += 1;
        } else if p[0] > p[1] {
            votes[0] += 1;
        }
        mean_obese += p[1];
    }
    let n = epoch_probs.len().max(1) as f64;
    mean_obese /= n;
    let mean_lean = epoch_probs.iter().map(|p| p[0]).sum::<f64>() / n;
    let tie = votes[0] == votes[1];
    let label = if votes[1] > votes[0] {
        Label::Obese
    } else if votes[0] > votes[1] {
        Label::Lean
    } else if mean_obese > mean_lean {
        Label::Obese
    } else {
        Label::Lean
    };
    Vote { label, lean_votes: votes[0], obese_votes: votes[1], mean_obese_prob: mean_obese, tie }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectVote {
    pub subject_id: String,
    pub truth: Label,
    pub vote: Vote,
    pub epoch_correct: usize,
    pub n_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold_id: usize,
    pub epoch_accuracy: f64,
    pub subject_accuracy: f64,
    pub subjects: Vec<SubjectVote>,
}

/// Scores one fold. `predictions` maps each test subject to its per-epoch
/// class probabilities; every subject in `truth` must be present.
pub fn score_fold(
    fold_id: usize,
    predictions: &BTreeMap<String, Vec<[f64; 2]>>,
    truth: &BTreeMap<String, Label>,
) -> Result<FoldScore> {
    if truth.is_empty() {
        return Err(Error::Empty("test subjects".into()));
    }
    let mut subjects = Vec::with_capacity(truth.len());
    let (mut correct_epochs, mut total_epochs, mut correct_subjects) = (0, 0, 0);
    for (id, &label) in truth {
        let probs = predictions.get(id).filter(|p| !p.is_empty()).ok_or_else(|| Error::MissingPrediction(id.clone()))?;
        let epoch_correct = probs
            .iter()
            .filter(|p| {
                let predicted = if p[1] > p[0] { Label::Obese } else { Label::Lean };
                predicted == label
            })
            .count();
        let vote = majority_vote(probs);
        correct_epochs += epoch_correct;
        total_epochs += probs.len();
        if vote.label == label {
            correct_subjects += 1;
        }
        subjects.push(SubjectVote { subject_id: id.clone(), truth: label, vote, epoch_correct, n_epochs: probs.len() });
    }
    Ok(FoldScore {
        fold_id,
        epoch_accuracy: correct_epochs as f64 / total_epochs as f64,
        subject_accuracy: correct_subjects as f64 / truth.len() as f64,
        subjects,
    })
}

/// Mean with two spreads: across fold accuracies and across subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std_over_folds: f64,
    pub std_over_subjects: f64,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Sample standard deviation (n − 1 denominator); zero for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub pipeline: String,
    pub folds: Vec<FoldScore>,
    pub epoch_level: Summary,
    pub subject_level: Summary,
    pub ties: Vec<String>,
}

impl ScoreTable {
    pub fn from_folds(pipeline: impl Into<String>, mut folds: Vec<FoldScore>) -> ScoreTable {
        folds.sort_by_key(|f| f.fold_id);
        let epoch: Vec<f64> = folds.iter().map(|f| f.epoch_accuracy).collect();
        let subject: Vec<f64> = folds.iter().map(|f| f.subject_accuracy).collect();
        let all: Vec<&SubjectVote> = folds.iter().flat_map(|f| &f.subjects).collect();
        let per_subject_epoch: Vec<f64> = all.iter().map(|s| s.epoch_correct as f64 / s.n_epochs as f64).collect();
        let per_subject_hit: Vec<f64> =
            all.iter().map(|s| if s.vote.label == s.truth { 1.0 } else { 0.0 }).collect();
        let ties = all.iter().filter(|s| s.vote.tie).map(|s| s.subject_id.clone()).collect();
        ScoreTable {
            pipeline: pipeline.into(),
            epoch_level: Summary { mean: mean(&epoch), std_over_folds: sample_std(&epoch), std_over_subjects: sample_std(&per_subject_epoch) },
            subject_level: Summary { mean: mean(&subject), std_over_folds: sample_std(&subject), std_over_subjects: sample_std(&per_subject_hit) },
            folds,
            ties,
        }
    }

    pub fn epoch_scores(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.epoch_accuracy).collect()
    }

    pub fn subject_scores(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.subject_accuracy).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MwuMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MwuResult {
    pub u_a: f64,
    pub u_b: f64,
    pub p_two_sided: f64,
    pub method: MwuMethod,
}

/// Midranks (1-based) of `values`.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Number of arrangements of `n` a-values among `n + m` positions that give
/// each value `U_a = 0..=n·m`.
fn u_distribution(n: usize, m: usize) -> Vec<u64> {
    // counts[i][u] for i a-values and j b-values, rolled over j
    let max_u = n * m;
    let mut table = vec![vec![vec![0u64; max_u + 1]; m + 1]; n + 1];
    for j in 0..=m {
        table[0][j][0] = 1;
    }
    for i in 1..=n {
        table[i][0][0] = 1;
        for j in 1..=m {
            for u in 0..=i * j {
                // largest element is an a (beats all j b's) or a b
                let with_a = if u >= j { table[i - 1][j][u - j] } else { 0 };
                let with_b = table[i][j - 1][u];
                table[i][j][u] = with_a + with_b;
            }
        }
    }
    table[n][m].clone()
}

fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Two-sided Mann-Whitney U test. Exact null distribution when
/// `n·m ≤ 400` and there are no ties; otherwise the normal approximation
/// with tie-corrected variance and continuity correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MwuResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("Mann-Whitney sample".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Mann-Whitney sample".into()));
    }
    let (n, m) = (a.len(), b.len());
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&all);
    let r_a: f64 = ranks[..n].iter().sum();
    let u_a = r_a - (n * (n + 1)) as f64 / 2.0;
    let nm = (n * m) as f64;
    let u_b = nm - u_a;

    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let has_ties = tie_term > 0.0;

    if n * m <= 400 && !has_ties {
        let dist = u_distribution(n, m);
        let total: u64 = dist.iter().sum();
        let u = u_a.round() as usize;
        let lower: u64 = dist[..=u].iter().sum();
        let upper: u64 = dist[u..].iter().sum();
        let p = (2.0 * lower.min(upper) as f64 / total as f64).min(1.0);
        return Ok(MwuResult { u_a, u_b, p_two_sided: p, method: MwuMethod::Exact });
    }

    let big_n = (n + m) as f64;
    let var = nm / 12.0 * ((big_n + 1.0) - tie_term / (big_n * (big_n - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((u_a - nm / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
        (2.0 * normal_sf(z)).min(1.0)
    };
    Ok(MwuResult { u_a, u_b, p_two_sided: p, method: MwuMethod::Normal })
}
