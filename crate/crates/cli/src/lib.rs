//! Pipeline front door: configuration, checkpoints, subcommands and
//! machine-readable outputs.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage};
pub use config::RunConfig;
pub use error::{CliError, Result};
