use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The dataset never visited this state-action pair. Distinct from a zero probability.
    #[error("no data for state {state}, action {action}")]
    NoData { state: usize, action: usize },

    #[error("degenerate value: {0}")]
    Degenerate(String),

    #[error(
        "inconsistent reward for state {state}: observed {observed} after {expected} (tolerance {tolerance})"
    )]
    InconsistentReward {
        state: usize,
        expected: f64,
        observed: f64,
        tolerance: f64,
    },

    #[error("value iteration did not converge after {sweeps} sweeps (residual {residual:e})")]
    NotConverged { sweeps: usize, residual: f64 },

    #[error("TD learning diverged at step {step}: |Q({state},{action})| = {value} exceeds {bound}")]
    Diverged {
        step: usize,
        state: usize,
        action: usize,
        value: f64,
        bound: f64,
    },

    #[error("cannot step from terminal state {0}")]
    TerminalStep(usize),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema mismatch: expected {expected}, found {found}")]
    Schema { expected: String, found: String },

    #[error("greedy alignment failed: {0}")]
    Alignment(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
