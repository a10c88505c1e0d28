//! Library side of the `dwdr` command-line tool.

pub mod commands;
pub mod config;
pub mod error;
pub mod sweep;

pub use config::RunConfig;
pub use error::CliError;
