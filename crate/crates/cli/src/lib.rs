//! Command-line front end for the purification pipeline: configuration
//! resolution, the commands themselves, run records, and chart rendering.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
pub mod runinfo;

pub use error::CliError;
