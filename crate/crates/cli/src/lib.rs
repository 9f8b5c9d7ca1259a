//! Experiment runner for the `twisted-smc` library: simulate datasets,
//! benchmark likelihood-estimate variance, run PMMH and score EKF tracking.
//! Every command reads a TOML run configuration and writes CSV files.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::CliError;
