//! Configuration-driven runner for the federated simulation engine.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::ExperimentFile;
pub use error::{CliError, CliResult};
pub use output::RunSummary;
