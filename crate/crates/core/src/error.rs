use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("insufficient warm-up: need at least {needed} samples, got {got}")]
    InsufficientWarmup { needed: usize, got: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("format error in field `{field}` at byte offset {offset}: {reason}")]
    Format {
        field: &'static str,
        offset: u64,
        reason: String,
    },

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(field: &'static str, offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            field,
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line front end:
    /// 1 usage, 2 I/O or format, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format { .. } | Error::DegenerateVector(_) => 2,
            Error::NumericalFailure(_) => 3,
            _ => 1,
        }
    }
}
