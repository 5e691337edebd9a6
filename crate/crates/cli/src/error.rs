use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] eegvae_core::Error),

    #[error(transparent)]
    Nn(#[from] eegvae_nn::Error),

    #[error(transparent)]
    Viz(#[from] eegvae_viz::Error),

    #[error("stage {stage} failed (artifact {path}): {source}")]
    Stage {
        stage: String,
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("integrity check failed for {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("incomplete run directory {path}: {reason}")]
    Incomplete { path: PathBuf, reason: String },

    #[error("leakage guard: {0}")]
    Leakage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
