//! Core data model and numerics for the EEG representation-learning toolkit.
//!
//! The crate covers everything that does not involve a trainable network:
//! the synthetic surrogate corpus, the preprocessing chain, subject-wise
//! cross-validation and scoring, the Mann-Whitney U test and the dichotomy
//! impurity separability measure.

pub mod dsp;
pub mod error;
pub mod evaluation;
pub mod impurity;
pub mod io;
pub mod preprocess;
pub mod rng;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use types::{EpochSet, FeatureMatrix, Label, Normalization, Recording, RowMeta, STANDARD_CHANNELS};
