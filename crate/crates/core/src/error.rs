use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid augmentation policy: {0}")]
    Policy(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("zero-norm embedding in {0}")]
    ZeroNorm(&'static str),

    #[error("loss denominator is empty: batch of {views} views has no negatives")]
    EmptyDenominator { views: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("ingestion error in {}: {message}", file.display())]
    Ingest { file: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Configuration problems map to exit code 1, everything else to 2.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Policy(_))
    }
}
