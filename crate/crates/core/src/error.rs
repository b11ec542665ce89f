use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("payload size mismatch for {path}: header declares {expected} bytes, found {found}")]
    PayloadMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("missing header {0}")]
    MissingHeader(PathBuf),

    #[error("malformed header {path}: {reason}")]
    BadHeader { path: PathBuf, reason: String },

    #[error("tape mismatch: {0}")]
    TapeMismatch(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad or inconsistent input data (as opposed
    /// to numerical breakdown or usage mistakes).
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::DimMismatch(_)
                | Error::PayloadMismatch { .. }
                | Error::MissingHeader(_)
                | Error::BadHeader { .. }
                | Error::Io { .. }
                | Error::Json(_)
                | Error::TapeMismatch(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
