//! `floquet`: band functions, asymptotic checks, spectral singularities and
//! eigenfunction expansions for periodic matrix differential operators.
//!
//! Exit codes: 0 success, 1 invalid input, 2 numerical failure or failed check.

mod commands;
mod config;
mod input;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use floquet_core::SpectralError;

use config::{Options, RunConfig};

#[derive(Parser)]
#[command(name = "floquet", version, about = "Floquet spectral analysis of periodic matrix differential operators")]
struct Cli {
    /// TOML file with defaults for any option (same names as the flags)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    options: Options,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Track band functions λ_{k,j}(t) with eigenfunctions and pairings
    Bands,
    /// Compare computed bands against their asymptotic expansions
    VerifyAsymptotics,
    /// Locate multiple eigenvalues in a λ rectangle and classify them
    Singularities,
    /// Reconstruct a sampled function from its eigenfunction expansion
    Expand,
    /// Gelfand transform round trip of a sampled function
    Gelfand,
}

/// Problem with what the user supplied, as opposed to a numerical failure.
#[derive(Debug, thiserror::Error)]
#[error("{0:#}")]
pub struct InputError(anyhow::Error);

impl InputError {
    pub fn wrap(err: anyhow::Error) -> anyhow::Error {
        if err.chain().any(|e| e.is::<InputError>()) {
            err
        } else {
            InputError(err).into()
        }
    }
}

/// A verification ran to completion and its criteria were not met.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CheckFailed(pub String);

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<InputError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<SpectralError>() {
            return match e {
                SpectralError::InvalidSpec(_)
                | SpectralError::InvalidParameters(_)
                | SpectralError::InadmissibleQuasimomentum { .. }
                | SpectralError::NearDegenerateMeanMatrix { .. } => 1,
                _ => 2,
            };
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let options = match &cli.config {
        Some(path) => cli.options.over(Options::from_toml_file(path)?),
        None => cli.options,
    };
    let cfg = RunConfig::resolve(options)?;
    match cli.command {
        Command::Bands => commands::bands(&cfg),
        Command::VerifyAsymptotics => commands::verify_asymptotics(&cfg),
        Command::Singularities => commands::singularities(&cfg),
        Command::Expand => commands::expand(&cfg),
        Command::Gelfand => commands::gelfand(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return ExitCode::from(if err.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
