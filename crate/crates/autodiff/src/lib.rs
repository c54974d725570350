//! Dense f64 tensors with define-by-run reverse-mode differentiation.
//!
//! The graph is rebuilt on every forward pass. Backward rules are written in
//! terms of the same primitives they differentiate, so a backward pass run
//! with `create_graph` produces gradients that can be differentiated again —
//! the mechanism behind meta-gradients through inner optimization steps.
//!
//! Tensors are immutable values with shared storage; a graph is confined to
//! the thread that built it, while detached tensors move freely across
//! threads.

mod backward;
mod check;
mod error;
pub mod ops;
mod tensor;

pub use backward::backward;
pub use check::{grad_check, grad_check_multi};
pub use error::{AdError, Result};
pub use tensor::Tensor;
