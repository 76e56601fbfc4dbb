use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed npy file: {0}")]
    Format(String),

    #[error("unsupported npy layout: {0}")]
    Unsupported(String),

    #[error("validation failed at row {row}: {reason}")]
    Validation { row: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("degenerate feature row {row}: zero norm")]
    DegenerateFeature { row: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (as opposed to runtime failures).
    pub fn is_invalid_input(&self) -> bool {
        matches!(
            self,
            Error::Format(_)
                | Error::Unsupported(_)
                | Error::Validation { .. }
                | Error::Param(_)
                | Error::Dimension(_)
                | Error::DegenerateFeature { .. }
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
