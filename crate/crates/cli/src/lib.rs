//! Command-line front end: configuration files, subcommands and reports.

pub mod config;
pub mod error;
pub mod run;
