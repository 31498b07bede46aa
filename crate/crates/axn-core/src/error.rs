//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// File does not match the expected on-disk format (bad magic, bad
    /// version, inconsistent dimensions, truncation).
    #[error("format error: {0}")]
    Format(String),

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    /// Scoring the requested items would exceed the per-query call budget.
    /// The ledger is left unchanged when this is raised.
    #[error("budget exhausted: used {used} of {budget}, requested {requested} more")]
    BudgetExhausted {
        used: usize,
        budget: usize,
        requested: usize,
    },

    #[error("scorer backend failure: {0}")]
    BackendFailure(String),

    #[error("failed to spawn scorer process: {0}")]
    SpawnFailure(String),

    #[error("scorer protocol handshake mismatch: expected version {expected}, got {got}")]
    HandshakeMismatch { expected: u32, got: u32 },

    #[error("degenerate score distribution: {0}")]
    DegenerateDistribution(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("training diverged: loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("lambda out of range: {0} (must be within [0, 1])")]
    LambdaOutOfRange(f64),
}
