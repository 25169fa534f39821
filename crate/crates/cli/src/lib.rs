//! Library side of the `gcf` command: run configuration, checkpoints and
//! the subcommand implementations.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use commands::CliError;
pub use config::{ConfigError, RunConfig};
