//! Desk-scale task distributions: sinusoid regression, 2D navigation and
//! synthetic Gaussian-cluster classification.

pub mod classification;
pub mod navigation;
pub mod sinusoid;
