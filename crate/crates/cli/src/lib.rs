//! Experiment driver for the `lnadapt` command-line tool.

pub mod commands;
pub mod config;
pub mod sweep;

pub use config::{Check, ExperimentConfig, System, TargetConfig};
pub use sweep::{run_grid, run_sweep, SweepReport, SweepRow};
