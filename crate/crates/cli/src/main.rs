mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{Overrides, RunConfig};

/// Failure classes with their exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration (exit 2).
    Usage(String),
    /// Unreadable, malformed or incompatible data (exit 3).
    Data(String),
    /// The computation itself failed (exit 1).
    Runtime(String),
}

impl CliError {
    pub fn usage(e: impl fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }

    pub fn data(e: impl fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ltm_core::Error> for CliError {
    fn from(e: ltm_core::Error) -> Self {
        use ltm_core::Error as E;
        match e {
            E::InvalidConfig(_)
            | E::InvalidGeometry(_)
            | E::InvalidCouplings(_)
            | E::OddExtent(_)
            | E::UnknownName { .. }
            | E::CoordinateOutOfRange { .. } => CliError::Usage(e.to_string()),
            E::Checkpoint(_) | E::Io(_) | E::Json(_) | E::ShapeMismatch { .. } | E::InsufficientSamples { .. } => {
                CliError::Data(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ltm",
    version,
    about = "Sparse triangular transport maps for 2D phi^4 lattice field theory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults are used for anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// L = 4, 200 epochs, 2000-step chains.
    #[arg(long, global = true)]
    smoke: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplerArg {
    Hmc,
    Imh,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one map and write train.csv and map.ltm.
    Train,
    /// Train every (ordering, neighborhood order) cell and write sweep_ess.csv.
    SweepOrderings,
    /// Run a sampler and write a chain CSV with a JSON sidecar.
    Sample {
        #[arg(long, value_enum)]
        sampler: SamplerArg,
        /// Trained map; required for imh.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Bootstrap errors of energy and susceptibility against sample count.
    Compare {
        /// Chain CSVs written by `sample`, each with its `.json` sidecar.
        #[arg(required = true)]
        chains: Vec<PathBuf>,
    },
    /// Sparse versus exact conditioning-set sizes.
    Fillin,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = cli.common;
    let overrides = Overrides {
        seed: common.seed,
        out: common.out,
        smoke: common.smoke,
    };
    let config = RunConfig::load(common.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Train => commands::train(&config),
        Command::SweepOrderings => commands::sweep(&config),
        Command::Sample { sampler, checkpoint } => commands::sample(&config, sampler, checkpoint.as_deref()),
        Command::Compare { chains } => commands::compare(&config, &chains),
        Command::Fillin => commands::fillin(&config),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
