mod commands;
mod config;
mod error;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

/// Induction-motor parameter identification from startup waveforms.
#[derive(Parser, Debug)]
#[command(name = "motor-ident", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir` from the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct FitOptions {
    /// Discretization used by the model: euler or preview.
    #[arg(long, default_value = "preview")]
    pub method: String,
    /// Parameter bounds (TOML with `lower` and `upper`).
    #[arg(long)]
    pub bounds_file: Option<PathBuf>,
    /// Initial-point box (TOML with `lower`, `upper`, optional `n_starts`, `seed`).
    #[arg(long)]
    pub init_box_file: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate paired startup datasets at the requested rates.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated breaker rates in Hz.
        #[arg(long, value_delimiter = ',')]
        fs: Option<Vec<u32>>,
        /// Noise seed of the synthetic startup.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Identify the seven parameters from one dataset.
    Identify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fit: FitOptions,
        /// Dataset file.
        #[arg(long)]
        dataset: PathBuf,
        /// Number of starts: the init-box midpoint plus seeded draws.
        #[arg(long, default_value_t = 1)]
        starts: usize,
        /// Fix the constant load torque at zero and fit the other six.
        #[arg(long)]
        pin_offset: bool,
    },
    /// Run independent fits from uniformly drawn starts.
    Multistart {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fit: FitOptions,
        #[arg(long)]
        dataset: PathBuf,
        /// Number of starts (overrides the init box).
        #[arg(long)]
        starts: Option<usize>,
        /// Seed of the start draws (overrides the init box).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Identify at each sampling rate with each discretization.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        fs: Option<Vec<u32>>,
        /// Restrict to one discretization.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Starts per cell.
        #[arg(long)]
        starts: Option<usize>,
    },
    /// Compare fits with and without the constant load term.
    Overparam {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        fs: Option<Vec<u32>>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        starts: Option<usize>,
    },
    /// Predict a current dataset from a parameter file and report the NMPE.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Parameter file written by `identify` or `multistart`.
        #[arg(long)]
        params: PathBuf,
        /// Current-kind dataset.
        #[arg(long)]
        dataset: PathBuf,
        /// Simulator: euler, preview or reference.
        #[arg(long, default_value = "preview")]
        method: String,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { common, fs, seed } => commands::simulate(&common, fs, seed),
        Command::Identify {
            common,
            fit,
            dataset,
            starts,
            pin_offset,
        } => commands::identify(&common, &fit, &dataset, starts, pin_offset),
        Command::Multistart {
            common,
            fit,
            dataset,
            starts,
            seed,
        } => commands::multistart(&common, &fit, &dataset, starts, seed),
        Command::Sweep {
            common,
            fs,
            method,
            seed,
            starts,
        } => commands::sweep(&common, fs, method, seed, starts),
        Command::Overparam {
            common,
            fs,
            method,
            seed,
            starts,
        } => commands::overparam(&common, fs, method, seed, starts),
        Command::Validate {
            common,
            params,
            dataset,
            method,
        } => commands::validate(&common, &params, &dataset, &method),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("motor-ident: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
