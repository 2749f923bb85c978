use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("no boxes to match")]
    NoBoxes,

    #[error("{0} undefined on this set")]
    Undefined(String),

    #[error("measure undefined: {0}")]
    MeasureUndefined(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("rank-deficient design matrix ({0})")]
    RankDeficient(String),

    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("{0}")]
    InvalidInput(String),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_line(self, line: usize) -> Self {
        Error::AtLine {
            line,
            source: Box::new(self),
        }
    }

    /// Line number for errors raised while parsing a dump.
    pub fn line(&self) -> Option<usize> {
        match self {
            Error::AtLine { line, .. } | Error::Malformed { line, .. } => Some(*line),
            _ => None,
        }
    }

    /// True for errors caused by the input data rather than by computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Validation { .. } | Error::Malformed { .. } | Error::Json(_) => true,
            Error::AtLine { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
