//! Library side of the `axn` command: config parsing, pipeline stages,
//! provenance. The binary in `main.rs` is a thin dispatcher over this so
//! tests can drive everything in-process.

pub mod config;
pub mod pipeline;
pub mod provenance;
pub mod scorer_spec;

use std::fmt;

/// Exit code 2: the configuration is invalid (nothing was computed).
/// Exit code 1: a stage failed at runtime (partial artifacts preserved).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(anyhow::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<axn_core::Error> for CliError {
    fn from(e: axn_core::Error) -> Self {
        CliError::Runtime(anyhow::anyhow!(e))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(anyhow::anyhow!(e))
    }
}

pub const EXIT_OK: u8 = 0;
pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
