//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors produced by any public operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller supplied an argument that violates an operation's contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A record, config key, or manifest entry failed schema validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// A line-oriented input could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A keyed lookup (e.g. a recorded context record) found nothing.
    #[error("lookup failed for id `{0}`")]
    Lookup(String),

    /// A checkpoint file is malformed; names the offending field or entry.
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    /// A metric is undefined for the given input (e.g. single-class AUC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A numeric evaluation produced a non-finite value.
    #[error("numeric failure in `{name}`: {message}")]
    Numeric { name: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI contract: 3 validation, 4 i/o, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_)
            | Error::Validation(_)
            | Error::Parse { .. }
            | Error::Lookup(_)
            | Error::UndefinedMetric(_) => 3,
            Error::Io { .. } | Error::Checkpoint(_) => 4,
            Error::Numeric { .. } => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
