//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CadirecError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("corpus is empty: {0}")]
    EmptyCorpus(String),

    #[error("5-core filtering removed every interaction")]
    EmptyAfterFilter,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("id {id} out of range [0, {max}]")]
    IdOutOfRange { id: usize, max: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss at step {step} in term {term} (max param norm {max_norm})")]
    NonFiniteLoss {
        step: usize,
        term: String,
        max_norm: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CadirecError>;
