use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the pipeline.
///
/// `Contract` covers violated preconditions (bad shapes, unknown labels,
/// empty inputs); the CLI maps it to exit code 2. I/O and format failures
/// map to exit code 3.
#[derive(Debug, Error)]
pub enum DyeError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("degenerate embedding (norm {norm:e})")]
    DegenerateEmbedding { norm: f64 },
    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("{path}: {msg}")]
    Load { path: PathBuf, msg: String },
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl DyeError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        DyeError::Contract(msg.into())
    }

    /// True for errors caused by the caller's inputs rather than the environment.
    pub fn is_contract(&self) -> bool {
        matches!(
            self,
            DyeError::Contract(_)
                | DyeError::DegenerateEmbedding { .. }
                | DyeError::Spec(_)
                | DyeError::Config(_)
                | DyeError::TrainingDiverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, DyeError>;
