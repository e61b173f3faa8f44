use std::path::PathBuf;

use crate::mdp::State;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("enumeration budget exceeded: needed {needed}, budget {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },

    #[error("reward table has no entry for state {state} action {action}")]
    RewardDomain { state: State, action: usize },

    #[error("advantage cache has no entry for state {0}")]
    CacheMiss(State),

    #[error("training diverged in phase `{phase}` at step {step}: non-finite loss")]
    Divergence { phase: String, step: usize },

    #[error("integrity check failed for {what}: expected hash {expected}, found {found}")]
    Integrity {
        what: String,
        expected: String,
        found: String,
    },

    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("unsupported reward granularity for this operation: {0}")]
    Granularity(String),

    #[error("prompt {prompt:?} cannot yield two distinct responses")]
    DegenerateSampler { prompt: Vec<usize> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn precondition(message: impl Into<String>) -> Self {
        Error::Precondition(message.into())
    }
}
