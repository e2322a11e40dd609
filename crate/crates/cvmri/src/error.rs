//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("undefined coherence: both inputs are zero")]
    UndefinedCoherence,
    #[error("no signal support: all coil images are zero")]
    NoSignalSupport,
    #[error("degenerate labels: need at least one positive and one negative")]
    DegenerateLabels,
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("archive format error: {0}")]
    Format(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}

impl From<candle_core::Error> for Error {
    fn from(e: candle_core::Error) -> Self {
        Error::Model(e.to_string())
    }
}
