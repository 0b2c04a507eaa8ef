//! Command-line front end: run configuration, checkpoints and subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use commands::{run, Cli, Command};
pub use config::{Overrides, RunConfig};

/// One-line JSON error record written to stderr on failure.
pub fn error_record(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}
