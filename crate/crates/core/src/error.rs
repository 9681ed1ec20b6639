use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the ranking pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed WAV data: {0}")]
    Format(String),

    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input too short: {0}")]
    TooShort(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("endpoint error: {0}")]
    Endpoint(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("checkpoint file error: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by non-finite arithmetic rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}
