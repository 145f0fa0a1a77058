use thiserror::Error;

#[derive(Debug, Error)]
pub enum AmqError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("value {value} outside the {bits}-bit signed range")]
    ValueOutOfRange { value: i64, bits: u32 },
    #[error("quantizer is frozen")]
    QuantizerFrozen,
    #[error("integer accumulator may overflow: inner dim {dim} exceeds bound {bound}")]
    AccumulatorOverflow { dim: usize, bound: usize },
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AmqError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(AmqError::InvalidArgument(msg.into()))
}

pub(crate) fn ensure_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AmqError::NonFinite(what))
    }
}
