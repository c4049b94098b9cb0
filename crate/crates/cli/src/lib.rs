//! On-disk formats, configuration and subcommands of the `tulabm` tool.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod io;
pub mod report;
pub mod tensorfile;

pub use checkpoint::Checkpoint;
pub use config::Settings;
pub use error::{CliError, Result};
pub use tensorfile::{TensorData, TensorFile};
