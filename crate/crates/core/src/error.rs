use thiserror::Error;

use crate::diffcore::DiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate parameters: {0}")]
    Degenerate(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{phase} phase diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence { phase: String, epoch: usize, step: usize, loss: f64 },
    #[error("format error: {0}")]
    Format(String),
    #[error("architecture mismatch: expected {expected}, found {found}")]
    ArchitectureMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
