//! The `adaptqa` command line: manifests in, tables and CSVs out.

pub mod commands;
pub mod error;
pub mod manifest;
pub mod report;

pub use error::{CliError, Result};
