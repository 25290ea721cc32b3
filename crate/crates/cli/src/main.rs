//! `reftrack` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 unreadable or
//! invalid input data, 3 runtime failure (backend, failed checks).

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    let cli = match args::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = args::resolve(cli).and_then(|(globals, command)| {
        env_logger::Builder::new()
            .filter_level(globals.log_level)
            .format_timestamp(None)
            .init();
        commands::run(&globals, command)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
