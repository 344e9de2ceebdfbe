//! Experiment driver: configuration, suite runners, CSV output and the CLI.

pub mod cli;
pub mod config;
pub mod error;
pub mod selftest;
pub mod suites;

pub use cli::cli_main;
pub use error::{ExpError, Result};
