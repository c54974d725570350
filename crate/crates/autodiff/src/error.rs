use thiserror::Error;

/// Errors surfaced by tensor construction, primitives and the backward pass.
#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor: data length {len} does not match shape {shape:?}")]
    ShapeDataMismatch { len: usize, shape: Vec<usize> },
    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward: target tensor at position {index} does not require gradients")]
    NonDifferentiable { index: usize },
    #[error("{op}: index {index} out of range for extent {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
}

pub type Result<T> = std::result::Result<T, AdError>;
