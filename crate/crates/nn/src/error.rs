use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] eegvae_core::Error),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error("training data contains a single class")]
    SingleClass,
    #[error("degenerate training data: {0}")]
    Degenerate(String),
    #[error("model of kind {kind} expects {expected} input, got {got}")]
    Contract { kind: String, expected: String, got: String },
    #[error("input length {have} is below the minimum {needed} for this network")]
    TooShort { needed: usize, have: usize },
    #[error("empty group: {0}")]
    EmptyGroup(String),
    #[error("no training samples")]
    Empty,
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

impl Error {
    pub fn shape(expected: impl std::fmt::Display, got: impl std::fmt::Display) -> Self {
        Error::Shape { expected: expected.to_string(), got: got.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
