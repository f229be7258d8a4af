//! Command-line and HTTP front ends for `dialoflow-core`.

pub mod commands;
pub mod error;
pub mod server;

pub use error::{CliError, CliResult};
