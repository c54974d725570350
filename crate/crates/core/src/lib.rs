//! Tri-flow few-shot learning at desk scale: architecture, objectives, task
//! suites, training loops and evaluation protocols.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod par;
pub mod rng;
pub mod tasks;
pub mod train;

pub use error::{CoreError, Result};
