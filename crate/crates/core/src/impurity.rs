//! Dichotomy impurity: for each attribute, the lowest weighted Gini
//! impurity reachable by a single threshold cut, and its mean over
//! attributes as a separability score (lower is more separable).
//!
//! A cut at `τ` puts `x < τ` on the left and `x ≥ τ` on the right. The
//! weighted impurity is piecewise constant in `τ`, so the candidates are the
//! midpoints between consecutive distinct values plus the degenerate cut at
//! the minimum (empty left side, which contributes weight 0). Candidates are
//! compared as exact rationals; ties keep the smallest `τ`.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FeatureMatrix, Label, RowMeta};

/// Binary Gini index `p(1 − p)`.
pub fn gini(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Probability(p));
    }
    Ok(p * (1.0 - p))
}

/// Weighted impurity of a cut as the rational `num / (den · n)`.
#[derive(Debug, Clone, Copy)]
struct CutValue {
    num: u128,
    den: u128,
}

impl CutValue {
    fn new(left: [u64; 2], right: [u64; 2]) -> CutValue {
        let side = |c: [u64; 2]| (c[0] as u128 * c[1] as u128, (c[0] + c[1]) as u128);
        let (pl, nl) = side(left);
        let (pr, nr) = side(right);
        match (nl, nr) {
            (0, _) => CutValue { num: pr, den: nr },
            (_, 0) => CutValue { num: pl, den: nl },
            _ => CutValue { num: pl * nr + pr * nl, den: nl * nr },
        }
    }

    fn cmp(&self, other: &CutValue) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }

    fn to_f64(self, n: usize) -> f64 {
        self.num as f64 / (self.den as f64 * n as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeImpurity {
    pub attribute_index: usize,
    pub di: f64,
    pub tau: f64,
    pub left_count: usize,
    pub right_count: usize,
    /// Only one class present; `di` is 0 by definition.
    pub single_class: bool,
}

/// Optimal dichotomy of one attribute.
pub fn dichotomy_impurity_attr(values: &[f64], labels: &[Label]) -> Result<AttributeImpurity> {
    if values.len() != labels.len() {
        return Err(Error::shape(values.len(), labels.len()));
    }
    if values.len() < 2 {
        return Err(Error::Empty(format!("need at least 2 values, got {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attribute values".into()));
    }
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));

    let mut total = [0u64; 2];
    for l in labels {
        total[l.index()] += 1;
    }
    let single_class = total[0] == 0 || total[1] == 0;

    // degenerate cut: everything on the right
    let mut best = CutValue::new([0, 0], total);
    let mut best_tau = values[order[0]];
    let mut best_left = 0;

    let mut left = [0u64; 2];
    for i in 1..n {
        left[labels[order[i - 1]].index()] += 1;
        let (a, b) = (values[order[i - 1]], values[order[i]]);
        if a == b {
            continue;
        }
        let right = [total[0] - left[0], total[1] - left[1]];
        let cut = CutValue::new(left, right);
        if cut.cmp(&best) == Ordering::Less {
            let mid = a + (b - a) / 2.0;
            best = cut;
            best_tau = if mid > a { mid } else { b };
            best_left = i;
        }
    }
    Ok(AttributeImpurity {
        attribute_index: 0,
        di: best.to_f64(n),
        tau: best_tau,
        left_count: best_left,
        right_count: n - best_left,
        single_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DIReport {
    pub tag: String,
    pub n_rows: usize,
    pub attributes: Vec<AttributeImpurity>,
    pub mean_di: f64,
    /// The ⌈D/4⌉ attributes with the lowest impurity, ascending.
    pub first_quantile_indices: Vec<usize>,
}

impl DIReport {
    pub fn first_quantile_values(&self) -> Vec<f64> {
        self.first_quantile_indices.iter().map(|&i| self.attributes[i].di).collect()
    }
}

/// Dichotomy impurity of every column of `features` against `labels`.
pub fn dichotomy_impurity_columns(columns: &[Vec<f64>], labels: &[Label], tag: &str) -> Result<DIReport> {
    if columns.is_empty() {
        return Err(Error::Empty("feature columns".into()));
    }
    let mut attributes = Vec::with_capacity(columns.len());
    for (j, col) in columns.iter().enumerate() {
        let mut a = dichotomy_impurity_attr(col, labels)?;
        a.attribute_index = j;
        attributes.push(a);
    }
    let mean_di = attributes.iter().map(|a| a.di).sum::<f64>() / attributes.len() as f64;
    let mut ranked: Vec<usize> = (0..attributes.len()).collect();
    ranked.sort_by(|&a, &b| attributes[a].di.total_cmp(&attributes[b].di).then(a.cmp(&b)));
    ranked.truncate(attributes.len().div_ceil(4));
    Ok(DIReport { tag: tag.to_string(), n_rows: labels.len(), attributes, mean_di, first_quantile_indices: ranked })
}

pub fn dichotomy_impurity(features: &FeatureMatrix, labels: &[Label]) -> Result<DIReport> {
    if features.dim == 0 {
        return Err(Error::Empty("feature dimension".into()));
    }
    if labels.len() != features.n_rows() {
        return Err(Error::shape(features.n_rows(), labels.len()));
    }
    let columns: Vec<Vec<f64>> = (0..features.dim).map(|j| features.column(j)).collect();
    dichotomy_impurity_columns(&columns, labels, &features.source)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSummary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

fn summarize(sorted: &[f64]) -> QuantileSummary {
    let n = sorted.len();
    let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    QuantileSummary { min: sorted[0], median, max: sorted[n - 1] }
}

/// First-quantile impurities of two feature schemes side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileComparison {
    pub tag_a: String,
    pub tag_b: String,
    pub values_a: Vec<f64>,
    pub values_b: Vec<f64>,
    pub summary_a: QuantileSummary,
    pub summary_b: QuantileSummary,
}

impl QuantileComparison {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>5}  {:>12}  {:>12}", "rank", self.tag_a, self.tag_b);
        for i in 0..self.values_a.len().max(self.values_b.len()) {
            let cell = |v: &[f64]| v.get(i).map(|x| format!("{x:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{:>5}  {:>12}  {:>12}", i + 1, cell(&self.values_a), cell(&self.values_b));
        }
        for (name, a, b) in [
            ("min", self.summary_a.min, self.summary_b.min),
            ("median", self.summary_a.median, self.summary_b.median),
            ("max", self.summary_a.max, self.summary_b.max),
        ] {
            let _ = writeln!(s, "{name:>6} {a:>12.6}  {b:>12.6}");
        }
        s
    }
}

pub fn quantile_comparison(a: &DIReport, b: &DIReport) -> Result<QuantileComparison> {
    let mut va = a.first_quantile_values();
    let mut vb = b.first_quantile_values();
    if va.is_empty() || vb.is_empty() {
        return Err(Error::Empty("DI report".into()));
    }
    va.sort_by(f64::total_cmp);
    vb.sort_by(f64::total_cmp);
    Ok(QuantileComparison {
        tag_a: a.tag.clone(),
        tag_b: b.tag.clone(),
        summary_a: summarize(&va),
        summary_b: summarize(&vb),
        values_a: va,
        values_b: vb,
    })
}

fn parse_label(s: &str) -> Option<Label> {
    match s.trim().to_ascii_lowercase().as_str() {
        "0" | "lean" => Some(Label::Lean),
        "1" | "obese" => Some(Label::Obese),
        _ => None,
    }
}

/// Parses a comma-separated matrix with a header row. The `label` column
/// (0/1 or lean/obese) is required; optional `subject` and `epoch` columns
/// provide provenance; every other column is a feature.
pub fn parse_delimited_matrix(text: &str, source: &str) -> Result<FeatureMatrix> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Empty("delimited matrix".into()))?
        .split(',')
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| header.iter().position(|h| h.eq_ignore_ascii_case(name));
    let label_col = find("label").ok_or_else(|| Error::InvalidConfig("missing label column".into()))?;
    let subject_col = find("subject");
    let epoch_col = find("epoch");
    let feature_cols: Vec<usize> =
        (0..header.len()).filter(|&i| i != label_col && Some(i) != subject_col && Some(i) != epoch_col).collect();
    let mut values = Vec::new();
    let mut rows = Vec::new();
    for (r, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(Error::shape(format!("{} cells", header.len()), format!("{} cells on row {}", cells.len(), r + 1)));
        }
        let label = parse_label(cells[label_col])
            .ok_or_else(|| Error::InvalidConfig(format!("bad label '{}' on row {}", cells[label_col], r + 1)))?;
        for &c in &feature_cols {
            let v: f32 = cells[c]
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad number '{}' on row {}", cells[c], r + 1)))?;
            values.push(v);
        }
        let subject_id = subject_col.map(|c| cells[c].trim().to_string()).unwrap_or_else(|| format!("row{r}"));
        let epoch_index = match epoch_col {
            Some(c) => cells[c].trim().parse().map_err(|_| Error::InvalidConfig(format!("bad epoch on row {}", r + 1)))?,
            None => 0,
        };
        rows.push(RowMeta { subject_id, epoch_index, label });
    }
    FeatureMatrix::new(feature_cols.len(), values, rows, source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(bits: &[u8]) -> Vec<Label> {
        bits.iter().map(|&b| Label::from_index(b as usize)).collect()
    }

    #[test]
    fn gini_values() {
        assert_eq!(gini(0.5).unwrap(), 0.25);
        assert_eq!(gini(0.0).unwrap(), 0.0);
        assert!((gini(0.3).unwrap() - 0.21).abs() < 1e-15);
        assert!(matches!(gini(1.5), Err(Error::Probability(_))));
        assert!(gini(-0.1).is_err());
    }

    #[test]
    fn separable_attribute() {
        let r = dichotomy_impurity_attr(&[1.0, 2.0, 3.0, 4.0], &labels(&[0, 0, 1, 1])).unwrap();
        assert_eq!((r.di, r.tau, r.left_count, r.right_count), (0.0, 2.5, 2, 2));
    }

    #[test]
    fn alternating_attribute_keeps_smallest_tau() {
        let r = dichotomy_impurity_attr(&[1.0, 2.0, 3.0, 4.0], &labels(&[0, 1, 0, 1])).unwrap();
        assert!((r.di - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(r.tau, 1.5);
    }

    #[test]
    fn single_class_is_zero_and_flagged() {
        let r = dichotomy_impurity_attr(&[3.0, 1.0, 2.0], &labels(&[1, 1, 1])).unwrap();
        assert_eq!(r.di, 0.0);
        assert!(r.single_class);
    }

    #[test]
    fn errors() {
        assert!(dichotomy_impurity_attr(&[1.0, 2.0], &labels(&[0])).is_err());
        assert!(dichotomy_impurity_attr(&[1.0, f64::NAN], &labels(&[0, 1])).is_err());
    }

    #[test]
    fn constant_columns_keep_global_gini() {
        let cols = vec![vec![5.0; 6]; 3];
        let rep = dichotomy_impurity_columns(&cols, &labels(&[0, 1, 0, 1, 0, 1]), "c").unwrap();
        assert!(rep.attributes.iter().all(|a| a.di == 0.25));
        assert_eq!(rep.mean_di, 0.25);
    }

    #[test]
    fn separable_plus_constant_column() {
        // a constant column cannot be split, so it keeps the global impurity
        let cols = vec![vec![1.0, 2.0, 3.0, 4.0], vec![7.0; 4]];
        let rep = dichotomy_impurity_columns(&cols, &labels(&[0, 0, 1, 1]), "c").unwrap();
        assert_eq!(rep.attributes[0].di, 0.0);
        assert_eq!(rep.attributes[1].di, 0.25);
        assert_eq!(rep.mean_di, 0.125);
        assert_eq!(rep.first_quantile_indices, vec![0]);
    }

    #[test]
    fn first_quantile_size_and_order() {
        let lab = labels(&[0, 1, 0, 1, 0, 1]);
        let cols: Vec<Vec<f64>> = (0..9)
            .map(|j| (0..6).map(|i| if j % 3 == 0 { i as f64 } else { ((i * (j + 1)) % 5) as f64 }).collect())
            .collect();
        let rep = dichotomy_impurity_columns(&cols, &lab, "q").unwrap();
        assert_eq!(rep.first_quantile_indices.len(), 3);
        let v = rep.first_quantile_values();
        assert!(v.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn quantile_comparison_orders() {
        let lab = labels(&[0, 0, 1, 1]);
        let good = dichotomy_impurity_columns(&vec![vec![1.0, 2.0, 3.0, 4.0]; 4], &lab, "good").unwrap();
        let bad = dichotomy_impurity_columns(&vec![vec![1.0; 4]; 4], &lab, "bad").unwrap();
        let same = quantile_comparison(&good, &good).unwrap();
        assert_eq!(same.values_a, same.values_b);
        let cmp = quantile_comparison(&good, &bad).unwrap();
        assert!(cmp.values_a.iter().zip(&cmp.values_b).all(|(a, b)| a < b));
        assert!(cmp.to_table().contains("median"));
    }

    #[test]
    fn delimited_matrix() {
        let text = "f1,label,f2,subject\n0.5,0,1.5,a\n2.5,obese,3.5,b\n";
        let fm = parse_delimited_matrix(text, "csv").unwrap();
        assert_eq!(fm.dim, 2);
        assert_eq!(fm.values, vec![0.5, 1.5, 2.5, 3.5]);
        assert_eq!(fm.rows[1].label, Label::Obese);
        assert_eq!(fm.rows[1].subject_id, "b");
        assert!(parse_delimited_matrix("f1\n1\n", "x").is_err());
        assert!(parse_delimited_matrix("f1,label\nx,0\n", "x").is_err());
    }

    proptest! {
        #[test]
        fn bounds_and_symmetries(
            rows in proptest::collection::vec((-100.0f64..100.0, any::<bool>()), 2..40),
            scale in 0.1f64..10.0,
        ) {
            let values: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let lab: Vec<Label> = rows.iter().map(|r| if r.1 { Label::Obese } else { Label::Lean }).collect();
            let base = dichotomy_impurity_attr(&values, &lab).unwrap();
            prop_assert!(base.di >= 0.0 && base.di <= 0.25);
            let p = lab.iter().filter(|l| **l == Label::Obese).count() as f64 / lab.len() as f64;
            prop_assert!(base.di <= gini(p).unwrap() + 1e-15);

            let flipped: Vec<Label> = lab.iter().map(|l| l.flipped()).collect();
            prop_assert_eq!(dichotomy_impurity_attr(&values, &flipped).unwrap().di, base.di);

            let mapped: Vec<f64> = values.iter().map(|v| (v * scale / 100.0).exp() * 3.0 - 1.0).collect();
            prop_assert_eq!(dichotomy_impurity_attr(&mapped, &lab).unwrap().di, base.di);
        }
    }
}
