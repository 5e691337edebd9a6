use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] eegvae_core::Error),

    #[error("perplexity {perplexity} is infeasible for {n} rows (need more than {} rows)", 3.0 * perplexity)]
    Perplexity { perplexity: f64, n: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unknown channel {0}")]
    UnknownChannel(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("i/o error on {path}: {reason}")]
    Io { path: std::path::PathBuf, reason: String },
}
