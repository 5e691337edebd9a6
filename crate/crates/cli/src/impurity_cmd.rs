//! Dichotomy impurity on stand-alone feature files.

use std::path::Path;

use eegvae_core::impurity::{dichotomy_impurity, parse_delimited_matrix, quantile_comparison, DIReport};
use eegvae_core::io::write_json;
use eegvae_core::FeatureMatrix;

use crate::error::{Error, Result};
use crate::features::{read_features, FEATURES_JSON};

/// Reads a `features.bin`/`features.json` directory (or the `features.json`
/// path itself), or a comma-separated matrix with a `label` column.
pub fn load_matrix(path: &Path) -> Result<FeatureMatrix> {
    let dir = if path.is_dir() {
        Some(path)
    } else if path.file_name().is_some_and(|n| n == FEATURES_JSON) {
        path.parent()
    } else {
        None
    };
    match dir {
        Some(d) => Ok(read_features(d)?.1),
        None => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let source = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(parse_delimited_matrix(&text, &source)?)
        }
    }
}

/// Writes `di_report.json` (and `first_quantile.txt` when comparing) to `out`.
pub fn impurity_files(input: &Path, compare: Option<&Path>, out: &Path) -> Result<(DIReport, Option<String>)> {
    let fm = load_matrix(input)?;
    let report = dichotomy_impurity(&fm, &fm.labels())?;
    write_json(&out.join("di_report.json"), &report)?;
    let table = match compare {
        Some(other) => {
            let fm2 = load_matrix(other)?;
            let r2 = dichotomy_impurity(&fm2, &fm2.labels())?;
            write_json(&out.join("di_report_compare.json"), &r2)?;
            let t = quantile_comparison(&report, &r2)?.to_table();
            eegvae_core::io::atomic_write(&out.join("first_quantile.txt"), t.as_bytes())?;
            Some(t)
        }
        None => None,
    };
    Ok((report, table))
}
