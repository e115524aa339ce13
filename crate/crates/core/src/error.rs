use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// NaN/inf where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A configuration field failed validation.
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// The mask leaves one of the index sets empty.
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    /// Undefined metric value (e.g. cosine against a zero vector).
    #[error("metric error: {0}")]
    Metric(String),

    /// Malformed or truncated file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Coarse classification used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. } | Error::Contract(_) | Error::Alignment(_) | Error::DegenerateMask(_) => {
                ErrorKind::Config
            }
            Error::Numeric(_) | Error::Metric(_) => ErrorKind::Numeric,
            Error::Dimension(_) | Error::Format(_) | Error::Io { .. } | Error::Json(_) => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}
