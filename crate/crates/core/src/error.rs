use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("payload size mismatch: header declares {expected} values, payload holds {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("non-finite intensity at index {0}")]
    NonFinite(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("region out of bounds: {0}")]
    OutOfBounds(String),
    #[error("empty mask: {0}")]
    EmptyMask(String),
    #[error("registration failed: {0}")]
    RegistrationFailed(String),
    #[error("not enough inputs: {0}")]
    TooFew(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. }
            | Error::Format { .. }
            | Error::UnsupportedFormat(_)
            | Error::SizeMismatch { .. } => ErrorClass::Io,
            Error::Json { .. } | Error::InvalidArgument(_) => ErrorClass::Config,
            Error::NonFinite(_)
            | Error::GeometryMismatch(_)
            | Error::OutOfBounds(_)
            | Error::EmptyMask(_)
            | Error::RegistrationFailed(_)
            | Error::TooFew(_)
            | Error::Numeric(_) => ErrorClass::Numeric,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
