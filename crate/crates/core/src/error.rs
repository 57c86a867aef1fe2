use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the solver stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected dimension {expected}, got {got}")]
    InputShape { expected: usize, got: usize },

    #[error("non-finite value encountered at point {point:?}: {what}")]
    NumericalFailure { point: Vec<f64>, what: String },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(field: &str, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn numerical(point: &[f64], what: impl Into<String>) -> Self {
        Error::NumericalFailure {
            point: point.to_vec(),
            what: what.into(),
        }
    }

    /// Process exit code associated with the error class.
    ///
    /// 1 for configuration/validation problems, 2 for I/O, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::NumericalFailure { .. } | Error::UndefinedMetric(_) => 3,
            _ => 1,
        }
    }

    /// Short stable identifier used on the machine-readable status line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InputShape { .. } => "input_shape",
            Error::NumericalFailure { .. } => "numerical",
            Error::Configuration(_) => "configuration",
            Error::Geometry(_) => "geometry",
            Error::Contract(_) => "contract",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Parse { .. } => "parse",
            Error::Validation { .. } => "validation",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
