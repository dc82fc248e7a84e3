//! Batch front end: reads a TOML run configuration, runs one analysis and
//! writes CSV tables and JSON reports into an output directory.
//!
//! Exit codes: 0 on success, 1 for configuration or input errors, 2 when a
//! solver fails.

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub mod commands;
pub mod config;
pub mod output;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input data error: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] robust_value::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if !e.is_input_error() => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "robval", version, about = "Robust value functions, distortions and diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output` in the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; overrides `threads` in the configuration.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the value function, entropy and diagnostics.
    Solve(Common),
    /// Realized distortion, pessimism spread and entropy series along observed data.
    Series(Common),
    /// Excess returns on earnings strips by horizon.
    Term(Common),
    /// First-order corrections for alternative benchmark models.
    Perturb(Common),
    /// Local identification matrix and observational-equivalence checks.
    Ident(Common),
    /// Dynamic discrete choice values and choice probabilities.
    Ddc(Common),
    /// Value function over beliefs about a hidden state.
    Learn(Common),
    /// Fit a mixture-of-experts benchmark by EM.
    Fit(Common),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Solve(_) => "solve",
            Command::Series(_) => "series",
            Command::Term(_) => "term",
            Command::Perturb(_) => "perturb",
            Command::Ident(_) => "ident",
            Command::Ddc(_) => "ddc",
            Command::Learn(_) => "learn",
            Command::Fit(_) => "fit",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Solve(c)
            | Command::Series(c)
            | Command::Term(c)
            | Command::Perturb(c)
            | Command::Ident(c)
            | Command::Ddc(c)
            | Command::Learn(c)
            | Command::Fit(c) => c,
        }
    }
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli.command) {
        Ok(files) => {
            for f in files {
                println!("{f}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("robval {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code())
        }
    }
}
