//! Library surface of the CLI so integration and acceptance tests can drive
//! the exact code paths the binary runs.

pub mod args;
pub mod report;
pub mod runner;

pub use args::Cli;
pub use runner::{run, CliError};
