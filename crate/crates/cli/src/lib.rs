//! The `lae` command line: training, test-time solving, single SCA runs,
//! baselines, parameter sweeps and solution audits.

pub mod commands;
pub mod sweep;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use lae_gdm::baselines::RandomLinks;
use lae_gdm::graph::RewardMode;

pub use commands::{load_config, Pipeline};

#[derive(Debug, Parser)]
#[command(name = "lae", version, about = "AeBS deployment by graph diffusion and SCA beamforming")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; every artifact path is relative to it.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Overrides `train.reward_mode`.
    #[arg(long, global = true, value_parser = parse_reward_mode)]
    pub reward_mode: Option<RewardMode>,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_reward_mode(s: &str) -> Result<RewardMode, String> {
    s.parse()
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the denoiser with reward feedback.
    Train {
        /// Continue from `<out>/checkpoint`.
        #[arg(long)]
        resume: bool,
    },
    /// Alternate diffusion sampling and SCA; trains first unless a
    /// checkpoint is given.
    Solve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Beamforming on a fixed association and channel file.
    Sca {
        #[arg(long)]
        instance: PathBuf,
    },
    /// Run a comparator.
    Baseline {
        kind: BaselineKind,
        /// Draws of the random policy.
        #[arg(long, default_value_t = 200)]
        runs: usize,
        /// Link law of the random policy.
        #[arg(long, value_enum, default_value_t = LinksArg::ValidShape)]
        links: LinksArg,
    },
    /// Sweep one parameter over a grid and seeds.
    Sweep {
        kind: SweepKind,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Comma-separated grid replacing the default one.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Option<Vec<f64>>,
    },
    /// Audit a solution file.
    Check {
        #[arg(long)]
        solution: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineKind {
    Random,
    Sdma,
    Pg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LinksArg {
    ValidShape,
    Independent,
}

impl From<LinksArg> for RandomLinks {
    fn from(l: LinksArg) -> Self {
        match l {
            LinksArg::Independent => RandomLinks::Independent,
            LinksArg::ValidShape => RandomLinks::ValidShape,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Aebs,
    Gu,
    Range,
    #[value(alias = "denoising-steps")]
    Steps,
    Lr,
}

/// Failure classes with their exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Missing or invalid configuration (exit 2).
    #[error("{0}")]
    Config(String),
    /// Anything that went wrong while running (exit 1).
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl From<lae_gdm::Error> for CliError {
    fn from(e: lae_gdm::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<lae_core::Error> for CliError {
    fn from(e: lae_core::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
