//! Command-line front end: argument and config handling, dataset layout,
//! and one function per subcommand.

pub mod args;
pub mod commands;
pub mod config;
pub mod memory;
pub mod plot;

use std::ffi::OsString;

use clap::{CommandFactory, FromArgMatches};

pub use args::Cli;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_ENHANCER: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(gifsplat::Error),
}

impl From<gifsplat::Error> for CliError {
    fn from(e: gifsplat::Error) -> Self {
        CliError::Run(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Run(e) => e.fmt(f),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use gifsplat::Error::*;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Run(e) => match e {
                InvalidArgument(_) => EXIT_USAGE,
                Io { .. } | Format(_) | Shape(_) => EXIT_IO,
                NonFinite(_) | Numeric(_) => EXIT_NUMERIC,
                Enhancer(_) => EXIT_ENHANCER,
            },
        }
    }
}

fn command() -> clap::Command {
    Cli::command()
        .args_override_self(true)
        .mut_subcommands(|s| s.args_override_self(true))
}

/// Parses `args` (including the program name), applying any config file.
pub fn parse_args(args: Vec<OsString>) -> Result<Cli, clap::Error> {
    let cmd = command();
    let args = config::expand_args(&cmd, args).map_err(|e| cmd.clone().error(clap::error::ErrorKind::InvalidValue, e))?;
    let matches = cmd.try_get_matches_from(args)?;
    Cli::from_arg_matches(&matches)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    use args::Command::*;
    match &cli.command {
        Synth(a) => commands::synth(a, cli.seed),
        Init(a) => commands::init(a),
        Refine(a) => commands::run_refine(a),
        Train(a) => commands::train(a, cli.seed),
        Baseline(a) => commands::baseline(a),
        Eval(a) => commands::eval(a),
        Bench(a) => commands::bench(a),
    }
}
