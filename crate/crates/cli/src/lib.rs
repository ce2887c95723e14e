//! Experiment runner for the centershift engine: config files, seed
//! sweeps, ablations and artifact layout.

pub mod config;
pub mod experiment;
