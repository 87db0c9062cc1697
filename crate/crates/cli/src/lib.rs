//! Library half of the command-line front end: checkpoint persistence, run
//! configuration and the subcommand implementations. The binary in `main.rs`
//! only parses arguments and dispatches here, so integration tests can drive
//! the same code directly.

pub mod checkpoint;
pub mod commands;
pub mod config;
