//! Experiment runner: configuration, run directories and the commands
//! behind the `adaface` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::execute;
pub use config::RunConfig;
pub use error::{CliError, CliResult};
