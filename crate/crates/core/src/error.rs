use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DfpsError>;

#[derive(Debug, Error)]
pub enum DfpsError {
    /// A caller broke a documented precondition (shape, sign, ordering).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("singular matrix in {context}")]
    Singular { context: String },

    /// Forward simulation produced a non-finite state.
    #[error("simulation blew up at step {step}")]
    Simulation { step: usize },

    /// Non-finite loss or gradient during training.
    #[error("training fault in {stage} at picard iteration {iteration}: {detail}")]
    Training { stage: String, iteration: usize, detail: String },

    #[error("undefined quantity: {0}")]
    Undefined(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl DfpsError {
    pub fn contract(msg: impl Into<String>) -> Self {
        DfpsError::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DfpsError::Io { path: path.into(), source }
    }
}
