use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("price {price} violates no-arbitrage bounds [{lower}, {upper})")]
    ArbitrageViolation { price: f64, lower: f64, upper: f64 },
    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite state at step {step} on path {path}")]
    NonFinite { step: usize, path: usize },
    #[error("zero bid-ask spread for quote {0}; calibration weight undefined")]
    ZeroSpread(usize),
    #[error("empty calibration set")]
    EmptyCalibrationSet,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("zero occupation mass")]
    ZeroMass,
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
