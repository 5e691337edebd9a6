//! `features.bin` (f32 LE, row-major) plus `features.json` (provenance).

use std::path::Path;

use eegvae_core::io::{read_f32_file_checked, read_json, write_f32_file, write_json};
use eegvae_core::{FeatureMatrix, RowMeta};
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const FEATURES_BIN: &str = "features.bin";
pub const FEATURES_JSON: &str = "features.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesHeader {
    pub source: String,
    pub dim: usize,
    pub n_rows: usize,
    pub model_digest: String,
    pub values_sha256: String,
    pub rows: Vec<RowMeta>,
}

pub fn write_features(dir: &Path, fm: &FeatureMatrix, model_digest: &str) -> Result<()> {
    let values_sha256 = write_f32_file(&dir.join(FEATURES_BIN), &fm.values)?;
    let header = FeaturesHeader {
        source: fm.source.clone(),
        dim: fm.dim,
        n_rows: fm.n_rows(),
        model_digest: model_digest.to_string(),
        values_sha256,
        rows: fm.rows.clone(),
    };
    write_json(&dir.join(FEATURES_JSON), &header)?;
    Ok(())
}

pub fn read_features(dir: &Path) -> Result<(FeaturesHeader, FeatureMatrix)> {
    let header: FeaturesHeader = read_json(&dir.join(FEATURES_JSON))?;
    let values = read_f32_file_checked(&dir.join(FEATURES_BIN), &header.values_sha256)?;
    let fm = FeatureMatrix::new(header.dim, values, header.rows.clone(), header.source.clone())?;
    Ok((header, fm))
}
