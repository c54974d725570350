//! Library surface of the `omni` binary: configuration loading, the four
//! command implementations and run manifests. The acceptance suite drives
//! experiments through these entry points.

pub mod commands;
pub mod config;
pub mod manifest;
