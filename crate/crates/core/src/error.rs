use std::path::PathBuf;

use crate::training::LossBundle;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or feature-map dimensions do not fit the operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input is well-formed but violates a contract (thresholds, labels, class ids, ...).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its content could not be decoded.
    #[error("malformed file {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    /// Training produced a non-finite or exploding objective.
    #[error("training diverged: {message}")]
    Divergence {
        message: String,
        recent: Vec<LossBundle>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}

macro_rules! validation_err {
    ($($arg:tt)*) => { $crate::error::Error::Validation(format!($($arg)*)) };
}

pub(crate) use shape_err;
pub(crate) use validation_err;
