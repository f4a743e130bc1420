//! Reproducible runs over the `perimotion` library: synthetic data
//! generation, fitting, mesh deformation and evaluation, each leaving a
//! hashed manifest next to its outputs.

pub mod args;
pub mod commands;
pub mod error;
pub mod manifest;
pub mod plot;
