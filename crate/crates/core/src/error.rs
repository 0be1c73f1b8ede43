use std::path::PathBuf;

use crate::controller::Phase;
use crate::transport::DecodeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller supplied data that violates an operation's preconditions.
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("operation `{op}` not allowed in phase {phase:?}")]
    WrongPhase { op: &'static str, phase: Phase },

    #[error("learner {learner} already registered")]
    DuplicateLearner { learner: u16 },

    #[error("learner {learner} is not part of this federation")]
    UnknownLearner { learner: u16 },

    #[error("learner {learner} already reported for round {round}")]
    DuplicateUpdate { learner: u16, round: u32 },

    #[error("round {round} aborted: {reason}")]
    RoundAborted { round: u32, reason: String },

    #[error("learner {learner} failed in round {round}: {reason}")]
    LearnerFailed {
        learner: u16,
        round: u32,
        reason: String,
    },

    #[error("training diverged: {0}")]
    NonFinite(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Decode(#[from] DecodeError),

    #[error("{path}: row {row}, column {column}: {message}")]
    Csv {
        path: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("csv: {0}")]
    CsvFormat(#[from] csv::Error),

    #[error("peer disconnected")]
    Disconnected,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by a bad experiment configuration rather than
    /// a failure during execution.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
