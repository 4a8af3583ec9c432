use std::path::PathBuf;

use attnprobe_core::Error as CoreError;

/// Process exit codes. The numeric values are part of the public interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Failure = 1,
    Usage = 2,
    NonIdentifiable = 3,
    ToleranceUnsatisfiable = 4,
    NotConverged = 5,
    LearnerFailure = 6,
    ConstraintInfeasible = 7,
    ReplayMismatch = 8,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn status(&self) -> ExitStatus {
        match self {
            CliError::Core(e) => core_status(e),
            _ => ExitStatus::Failure,
        }
    }
}

pub fn core_status(e: &CoreError) -> ExitStatus {
    match e {
        CoreError::NonIdentifiable => ExitStatus::NonIdentifiable,
        CoreError::ToleranceUnsatisfiable { .. } => ExitStatus::ToleranceUnsatisfiable,
        CoreError::LearnerFailure(_) => ExitStatus::LearnerFailure,
        CoreError::ConstraintInfeasible(_) => ExitStatus::ConstraintInfeasible,
        _ => ExitStatus::Failure,
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
