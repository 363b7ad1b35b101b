use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("time {time} is not a grid point (dt = {dt})")]
    OffGrid { time: f64, dt: f64 },
    #[error("{what} = {value} is not an integer multiple of dt = {dt}")]
    Misaligned { what: &'static str, value: f64, dt: f64 },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("at least 2 samples are required, got {0}")]
    InsufficientSamples(usize),
    #[error("degenerate Donsker kernel: remaining information variance {0} <= 0")]
    DegenerateKernel(f64),
    #[error("path does not cover time {needed} (ends at {available})")]
    PathTooShort { needed: f64, available: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn ensure_finite(value: f64, context: impl FnOnce() -> String) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(LabError::NonFinite(context()))
    }
}
