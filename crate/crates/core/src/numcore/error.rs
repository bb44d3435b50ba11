use thiserror::Error;

/// Failures raised by the numeric kernel.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{0}: non-finite value encountered")]
    NonFinite(&'static str),
    #[error("month {0} outside 1..=12")]
    InvalidMonth(u8),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("loss function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type NumResult<T> = Result<T, NumError>;
