use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MpemError>;

#[derive(Debug, Error)]
pub enum MpemError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid number of decomposition levels: {0} (must be at least 1)")]
    InvalidLevels(usize),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("power iteration did not converge after {iterations} iterations (last change {last_change:e})")]
    Convergence { iterations: usize, last_change: f64 },

    #[error("degenerate quadratic form: residual plus prior energy is zero")]
    Degenerate,

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("measurement vector is identically zero")]
    EmptyInput,

    #[error("reference signal is identically zero")]
    ZeroSignal,

    #[error("metric is infinite (exact recovery)")]
    InfiniteValue,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),
}

impl MpemError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MpemError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        MpemError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
