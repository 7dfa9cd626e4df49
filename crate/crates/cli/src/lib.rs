//! File formats, configuration and subcommands of the `pixclust` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;

pub use error::{CliError, Result};
