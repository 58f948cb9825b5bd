use thiserror::Error;

use crate::nets::BlockKey;
use crate::schedule::PredictionKind;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("singular conversion {from:?} -> {to:?} at t = {t}")]
    SingularConversion {
        from: PredictionKind,
        to: PredictionKind,
        t: f64,
    },

    #[error("singular value: {0}")]
    Singular(String),

    #[error("prediction kinds differ: {0:?} vs {1:?}")]
    KindMismatch(PredictionKind, PredictionKind),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value {context}")]
    NonFinite { context: String },

    #[error("non-finite activation after block {block}")]
    NonFiniteBlock { block: BlockKey },

    #[error("invalid genome: {0}")]
    InvalidGenome(String),

    #[error("no block at {0}")]
    NoSuchBlock(BlockKey),

    #[error("degenerate posterior: {0}")]
    DegeneratePosterior(String),

    #[error("training diverged at step {step}: loss {loss} exceeds {limit}")]
    Diverged { step: usize, loss: f64, limit: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("latency table: {0}")]
    Latency(String),

    #[error("latency target {target} ms unreachable (cheapest non-empty genome costs {cheapest} ms)")]
    UnreachableTarget { target: f64, cheapest: f64 },

    #[error("probe checksum mismatch: expected {expected}, found {found}")]
    ProbeChecksum { expected: String, found: String },

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("array file: {0}")]
    Npy(String),

    #[error("plot: {0}")]
    Plot(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Errors with `NonFinite` unless every entry of `values` is finite.
pub(crate) fn ensure_finite<'a>(
    values: impl IntoIterator<Item = &'a f64>,
    context: impl FnOnce() -> String,
) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context: context() })
    }
}
