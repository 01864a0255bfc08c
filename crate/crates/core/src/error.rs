use std::path::PathBuf;

use thiserror::Error;

use crate::train::TrainingHistory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("data integrity: {0}")]
    Integrity(String),

    #[error("degenerate rating scale: every rating equals {0}")]
    DegenerateScale(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        history: Box<TrainingHistory>,
    },

    #[error("could not place {groups} ideal items with separation {separation} after {attempts} attempts")]
    Placement {
        groups: usize,
        separation: f64,
        attempts: usize,
    },

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("stale or mismatched forward cache: {0}")]
    StaleCache(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    /// Process exit code used by the command-line driver.
    ///
    /// 2 = configuration or input-format error, 3 = numeric failure, 4 = missing input.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::Diverged { .. } => 3,
            Error::MissingInput(_) => 4,
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 4,
            _ => 2,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
