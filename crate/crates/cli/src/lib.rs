//! Experiment runner for `gsglab-core`: config files, run manifests, metrics
//! CSVs, and the train / eval / ablate / sweep-batch commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod output;

pub use config::RunConfig;
pub use error::CliError;
