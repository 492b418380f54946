use thiserror::Error;

use crate::config::ConfigError;
use crate::trace::TraceError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Trace(#[from] TraceError),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("head dimension must be positive")]
    ZeroHeadDim,

    #[error("logits contain non-finite values")]
    NonFiniteLogits,

    #[error("row {row}: kept set is empty and n = 0, n-softmax is undefined (0/0)")]
    EmptyKeptSet { row: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("smoothing constant n must be finite and >= 0, got {0}")]
    InvalidSmoothing(f64),

    #[error("head stack is empty")]
    NoHeads,

    #[error("recent window {recent} must be shorter than the key count {len}")]
    RecentWindowTooLarge { recent: usize, len: usize },

    #[error("mask universes differ: {left} vs {right}")]
    UniverseMismatch { left: usize, right: usize },

    #[error("mask indices must be strictly ascending and below the universe size {universe}")]
    MalformedMask { universe: usize },

    #[error("importance vectors are empty")]
    EmptyImportance,

    #[error("sample list is empty")]
    EmptySamples,

    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),

    #[error("histogram needs at least 2 bins, got {0}")]
    TooFewBins(usize),

    #[error("trace has no layers")]
    Layerless,

    #[error("trace step {step}: {reason}")]
    TraceShape { step: usize, reason: String },

    #[error("trace ended after {available} steps, {requested} requested")]
    TraceTruncated { available: usize, requested: usize },

    #[error("invalid synthetic spec: {0}")]
    InvalidSynthSpec(String),

    #[error("budget fraction must be positive and finite, got {0}")]
    InvalidBudgetFraction(f64),

    #[error("sweep grid is empty")]
    EmptyGrid,

    #[error("unknown {kind} '{value}'")]
    UnknownName { kind: &'static str, value: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
