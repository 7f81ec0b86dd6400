//! Experiment driver for the `ibloss` library: dataset generation, two-phase
//! training, evaluation, influence reports and one-axis sweeps, all driven by
//! a TOML config.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod sweep;

pub use config::{load_config, ExperimentConfig};
pub use error::{CliError, Result};
