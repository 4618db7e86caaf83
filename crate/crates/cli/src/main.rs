//! `bridgekit` command-line front end.
//!
//! Exit codes: 0 success, 1 failed check or runtime error, 2 configuration
//! error, 3 checkpoint incompatible with the configuration.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use bridgekit::check::Fault;
use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::SampleArgs;
use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("{0}")]
    Runtime(String),
    #[error("failed checks: {}", .0.join(", "))]
    CheckFailed(Vec<String>),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) | CliError::CheckFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Incompatible(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "bridgekit", version = commands::VERSION, about = "Schrödinger bridge training, sampling and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FaultArg {
    VelocitySign,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an endpoint regressor; writes checkpoint, loss CSV and manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples from a trained checkpoint.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use the true endpoints of the drawn pairs instead of a network.
        #[arg(long, hide = true)]
        oracle: bool,
    },
    /// Straightness of the bridge and VP paths on a standard-normal coupling.
    Curvature {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of coupling samples.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Tabulate the noise schedule.
    ScheduleDump {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of grid points on [0, 1].
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train on the Gaussian mixture to swiss roll problem and sample from it.
    ToyDemo {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of generated samples.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Run the invariant suite.
    Check {
        #[arg(long, hide = true, value_enum)]
        fault: Option<FaultArg>,
    },
}

fn load(path: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => RunConfig::defaults(),
    }
}

fn run(cli: Cli) -> Result<Vec<String>, CliError> {
    match cli.command {
        Command::Train { config, out } => commands::train(&load(Some(&config))?, out.as_deref()),
        Command::Sample {
            config,
            checkpoint,
            n,
            out,
            oracle,
        } => {
            let cfg = load(Some(&config))?;
            commands::sample_cmd(
                &cfg,
                &SampleArgs {
                    checkpoint: checkpoint.as_deref(),
                    n,
                    out: out.as_deref(),
                    oracle,
                },
            )
        }
        Command::Curvature { config, out, n } => commands::curvature(&load(config.as_ref())?, out.as_deref(), n),
        Command::ScheduleDump { config, out, n } => {
            commands::schedule_dump(&load(config.as_ref())?, out.as_deref(), n)
        }
        Command::ToyDemo { config, out, n } => commands::toy_demo(&load(config.as_ref())?, out.as_deref(), n),
        Command::Check { fault } => commands::check(fault.map(|FaultArg::VelocitySign| Fault::VelocitySign)),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
