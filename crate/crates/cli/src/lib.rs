//! Command-line driver: dataset generation, training, evaluation, gradient
//! checks and the four-row ablation.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
