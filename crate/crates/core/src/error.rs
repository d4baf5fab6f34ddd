use thiserror::Error;

/// Errors surfaced by the numeric core, layers, and search loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input to fixed-point conversion: {0}")]
    NonFinite(f64),
    #[error("shift exponent {0} outside [{min}, {max}]", min = crate::fxp::SHIFT_MIN, max = crate::fxp::SHIFT_MAX)]
    ShiftExponent(i32),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid genotype: {0}")]
    InvalidGenotype(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("search diverged: {0}")]
    Diverged(String),
    #[error("packed weight stream corrupt: {0}")]
    BadPackedStream(String),
}

pub type Result<T> = std::result::Result<T, Error>;
