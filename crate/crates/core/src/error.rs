use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("recording too short: need more than {needed} samples, have {have}")]
    TooShort { needed: usize, have: usize },

    #[error("invalid band edges: lo={lo} hi={hi} at rate {rate} Hz")]
    InvalidBand { lo: f64, hi: f64, rate: f64 },

    #[error("rate ratio {target}/{from} is not rational within tolerance")]
    IrrationalRatio { from: f64, target: f64 },

    #[error("zero-variance channel {channel} in subject {subject}")]
    ZeroVariance { subject: String, channel: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("duplicate subject id {0}")]
    DuplicateSubject(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("cannot partition subjects: {0}")]
    Partition(String),

    #[error("missing prediction for subject {0}")]
    MissingPrediction(String),

    #[error("probability {0} outside [0, 1]")]
    Probability(f64),

    #[error("integrity check failed for {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape { expected: expected.to_string(), got: got.to_string() }
    }
}
