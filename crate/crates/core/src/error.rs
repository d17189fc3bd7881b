use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GaitError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GaitError {
    /// Tensor or vector shapes disagree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Caller-supplied data violates a precondition.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A value went non-finite or a computation degenerated.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GaitError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GaitError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        GaitError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            GaitError::Config(_) | GaitError::UnsupportedArchitecture(_) => 2,
            GaitError::Numeric(_) => 4,
            GaitError::Dimension(_)
            | GaitError::Input(_)
            | GaitError::Format { .. }
            | GaitError::Io { .. } => 3,
        }
    }
}

macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::GaitError::Input(format!($($arg)*)) };
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::GaitError::Dimension(format!($($arg)*)) };
}

pub(crate) use dim_err;
pub(crate) use input_err;
