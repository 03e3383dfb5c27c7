mod args;
mod commands;
mod config;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};

use args::Cli;

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or input paths (exit 2).
    Usage(String),
    /// Failure while doing the work (exit 1).
    Runtime(mdmask::Error),
}

impl From<mdmask::Error> for CliError {
    fn from(e: mdmask::Error) -> Self {
        use mdmask::Error as E;
        match e {
            E::Config(_) | E::UnknownFamily(_) | E::Arch(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

fn parse(argv: &[OsString]) -> Result<Cli, clap::Error> {
    let cmd = Cli::command().mut_subcommands(|s| s.args_override_self(true));
    let matches = cmd.try_get_matches_from(argv)?;
    Cli::from_arg_matches(&matches)
}

fn main() -> ExitCode {
    let mut argv: Vec<OsString> = std::env::args_os().collect();
    let cli = match parse(&argv) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let cli = match &cli.config {
        None => cli,
        Some(path) => match config::config_flags(path) {
            Ok(extra) => {
                argv.extend(extra);
                match parse(&argv) {
                    Ok(cli) => cli,
                    Err(e) => e.exit(),
                }
            }
            Err(e) => return report(e),
        },
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    match e {
        CliError::Usage(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        CliError::Runtime(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
