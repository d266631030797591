//! Batch commands that drive the `blockflow` checks and experiments and
//! write versioned JSON / CSV reports.
//!
//! Exit codes: 0 when every check passes, 1 when a check fails, 2 on a
//! configuration error.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use error::{CliError, CliResult};
pub use report::Report;
