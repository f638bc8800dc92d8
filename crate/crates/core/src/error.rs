use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch for {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error(
        "outcome m={m} at efficiency index {nu} was observed (frequency {frequency}) \
         but the model assigns it zero probability; the truncation N may be too small"
    )]
    ZeroProbabilityOutcome { nu: usize, m: usize, frequency: f64 },

    #[error("linear system is rank deficient: effective rank {rank} < {unknowns} unknowns")]
    RankDeficient { rank: usize, unknowns: usize },

    #[error("peak fit did not converge after {iterations} iterations")]
    FitDidNotConverge { iterations: usize },

    #[error("found {found} candidate peaks, need {needed}")]
    TooFewPeaks { found: usize, needed: usize },

    #[error("{failed} of {total} sweep cells failed")]
    PartialFailure { failed: usize, total: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (bad config, bad parameters,
    /// malformed files), as opposed to failures during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter { .. }
                | Error::ShapeMismatch { .. }
                | Error::Config(_)
                | Error::Parse { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
