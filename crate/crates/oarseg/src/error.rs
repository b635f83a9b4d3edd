//! Error types shared across the crate.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor math, model construction, data handling and I/O.
#[derive(Debug, Clone)]
pub enum Error {
    /// Shapes or axes of an operation's inputs do not line up.
    Shape { op: &'static str, detail: String },
    /// A numeric op produced or received NaN/Inf; `context` names the site.
    NonFinite { context: String },
    /// Invalid configuration value (hyperparameter, spec field, CLI flag).
    Config { detail: String },
    /// Dataset or file contents violate a documented format invariant.
    Data { detail: String },
    /// Filesystem failure wrapped with the offending path.
    Io { path: String, detail: String },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config {
            detail: detail.into(),
        }
    }

    pub fn data(detail: impl Into<String>) -> Self {
        Error::Data {
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, err: &std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            detail: err.to_string(),
        }
    }

    /// True for numeric (NaN/Inf) failures, which map to a distinct exit code.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Config { detail } => write!(f, "invalid configuration: {detail}"),
            Error::Data { detail } => write!(f, "invalid data: {detail}"),
            Error::Io { path, detail } => write!(f, "io error at {path}: {detail}"),
        }
    }
}

impl std::error::Error for Error {}
