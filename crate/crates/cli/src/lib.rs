//! Command-line front end: argument parsing, commands and report files.

pub mod args;
pub mod commands;
pub mod config;
pub mod output;
pub mod tables;

use std::io;

use thiserror::Error;

pub use args::{BackendArg, Cli, Command};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// 2 config, 3 data, 4 transport, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Transport(_) => 4,
            CliError::Io(_) | CliError::Other(_) => 1,
        }
    }
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    commands::dispatch(cli)
}
