use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("training diverged in {stage} at step {step}")]
    TrainingDiverged { stage: String, step: usize },

    #[error("not fitted: {0}")]
    Unfitted(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("format version mismatch in {}: expected {expected}, found {found}", .path.display())]
    VersionMismatch {
        path: PathBuf,
        expected: u16,
        found: u16,
    },

    #[error("checksum failure in {}", .0.display())]
    Checksum(PathBuf),

    #[error("malformed data in {}: {msg}", .path.display())]
    Format { path: PathBuf, msg: String },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::Shape(_) | Error::Infeasible(_) => 2,
            Error::MissingFile(_) | Error::Unfitted(_) => 3,
            Error::TrainingDiverged { .. } | Error::NumericalDomain(_) => 4,
            Error::Verification(_)
            | Error::Checksum(_)
            | Error::VersionMismatch { .. }
            | Error::Format { .. } => 5,
            Error::Empty(_) => 2,
            Error::Io(_) | Error::Json(_) => 1,
        }
    }
}
