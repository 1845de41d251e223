use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{kernel}`: {detail}")]
    Shape { kernel: &'static str, detail: String },

    #[error("numerical overflow in `{kernel}`: non-finite output")]
    NonFinite { kernel: &'static str },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("variable does not belong to this tape")]
    ForeignTape,

    #[error("invalid label sequence: {0}")]
    Labels(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("fixed K = {target} not reached within {budget} rejections")]
    RejectionBudget { target: usize, budget: usize },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("embedding store: {0}")]
    Store(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at iteration {iteration} ({branch} branch)")]
    Diverged { iteration: usize, branch: &'static str },

    #[error("non-finite gradient passed to the optimizer")]
    NonFiniteGradient,

    #[error("enumeration budget exceeded: N = {n} > {max}")]
    Enumeration { n: usize, max: usize },

    #[error("{0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
