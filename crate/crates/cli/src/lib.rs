//! Command implementations behind the `secrepair` binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 integrity error.

pub mod ablation;
pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod scan;

pub use commands::{main_with_args, run, Cli, Command};
pub use error::CliError;
