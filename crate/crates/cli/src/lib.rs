//! Staged, cached experiment runner: synthetic corpus, preprocessing, per-fold
//! VAE and classifier training, subject-level scoring, dichotomy impurity,
//! spatial patterns and figures.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod features;
pub mod impurity_cmd;
pub mod pipeline;
pub mod report;

pub use config::{ExperimentConfig, Pipeline};
pub use error::{Error, Result};
pub use pipeline::{run, Runner, Stage};
pub use report::{report, RunReport};
