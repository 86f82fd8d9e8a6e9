//! Command-line harness: experiment configs, on-disk formats and the
//! `gen`/`train`/`sweep`/`report`/`check` commands.

pub mod canonical;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod run;

pub use error::{CliError, CliResult};
