use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the modelling library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// An observation or threshold fell outside the support of a bounded
    /// distribution (e.g. below the GEV lower endpoint).
    #[error("domain error at cell {cell}: {detail}")]
    Domain { cell: usize, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("root not bracketed: {0}")]
    NotBracketed(String),

    #[error("feature `{0}` is constant on the training data")]
    ConstantFeature(String),

    #[error("forecast cdf is not monotone for observation {0}")]
    NonMonotoneForecast(usize),

    #[error("schema error in {file}: {detail}")]
    Schema { file: String, detail: String },

    #[error("architecture fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("checkpoint is corrupt: {0}")]
    Checkpoint(String),

    #[error("non-finite loss {value} at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, value: f64 },

    /// Training stopped; `last_good` is the most recent saved state.
    #[error("training stopped at epoch {epoch}: {detail}")]
    Diverged {
        epoch: usize,
        detail: String,
        last_good: Box<crate::train::Checkpoint>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
