//! File formats, configuration and subcommands of the `coloc` binary.
//!
//! The binary is a thin layer over [`commands`]: it parses flags, resolves
//! the [`config::RunConfig`], calls a command and writes what it returns.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod report;

pub use error::{CliError, Result};

/// The bundled synthetic trace, identical to `gen-trace --preset bundled`.
pub const BUNDLED_TRACE: &str = include_str!("../data/bundled_trace.csv");
