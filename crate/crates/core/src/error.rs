use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("empty model: {0}")]
    EmptyModel(String),

    #[error("wrong object class: {0}")]
    WrongClass(String),

    #[error("no valid pose after {attempts} attempts")]
    NoValidPose { attempts: usize },

    #[error("empty trajectory")]
    EmptyTrajectory,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("io error at {path}: {source}")]
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

    /// True for errors caused by bad input data rather than by the runtime.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Format(_) | Error::Validation(_) | Error::DimensionMismatch(_)
        )
    }
}
