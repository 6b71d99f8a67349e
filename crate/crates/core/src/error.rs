//! Error type shared across the crate.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition (shape, length, range).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical error{}: {message}", sample_id.map(|id| format!(" (sample {id})")).unwrap_or_default())]
    Numerical {
        message: String,
        sample_id: Option<usize>,
    },

    #[error("data error: {0}")]
    Data(String),

    /// Fewer than two hard samples; the caller skips prompt optimization.
    #[error("hard set too small for prompt optimization ({0} samples)")]
    SkipGepa(usize),

    #[error("reflection failed: {0}")]
    Reflection(String),

    #[error("oracle refused input: {0}")]
    OracleLimit(String),

    #[error("audit failure: {0}")]
    Audit(String),

    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("run aborted at epoch {epoch} ({stage}): {source}")]
    Run {
        epoch: usize,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn numerical(message: impl Into<String>, sample_id: Option<usize>) -> Self {
        Error::Numerical {
            message: message.into(),
            sample_id,
        }
    }

    pub(crate) fn at_epoch(self, epoch: usize, stage: &'static str) -> Self {
        Error::Run {
            epoch,
            stage,
            source: Box::new(self),
        }
    }
}
