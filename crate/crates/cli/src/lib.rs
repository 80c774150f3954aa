//! Experiment harness for the `vtslam` filter: scenario presets, seeded Monte
//! Carlo runs, and CSV/JSON outputs.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod output;
