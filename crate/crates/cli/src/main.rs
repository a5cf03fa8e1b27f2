//! `dss-lab`: run the adaptation grid, check the optimizer's properties and
//! turn recorded runs into plot-ready tables.
//!
//! Exit codes: 0 ok, 1 property failure, 2 usage or config error, 3 numeric
//! failure.

mod analyze;
mod config;
mod layout;
mod run;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{AnalyzeMode, ConfigError, Loaded};

#[derive(Parser)]
#[command(name = "dss-lab", version, about = "Domain-specific suppression laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the condition grid and write reports, gradient statistics and
    /// datasets.
    Run {
        /// Config file; the bundled default when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config value, e.g. `dss.lambda=0`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory, overriding the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seeds to run, overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Concurrent runs.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Run the property suite and report each property against its tolerance.
    Verify {
        /// Config file whose `verify` section supplies the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a tolerance (`norm_growth=1e-9`), `seed` or
        /// `orthogonality_lambda`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Derive analysis tables from a run directory.
    Analyze {
        /// Directory written by `run`.
        dir: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Histograms,
    Ratios,
    Drift,
    Svd,
}

impl From<ModeArg> for AnalyzeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Histograms => AnalyzeMode::Histograms,
            ModeArg::Ratios => AnalyzeMode::Ratios,
            ModeArg::Drift => AnalyzeMode::Drift,
            ModeArg::Svd => AnalyzeMode::Svd,
        }
    }
}

/// A failed command with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn property(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::config(e.0)
    }
}

/// Runs are single-threaded internally, so the only accepted settings are
/// the default `1` and `0`; anything else is a usage error.
fn check_determinism_env() -> Result<(), Failure> {
    match std::env::var("DSS_LAB_DETERMINISTIC") {
        Err(std::env::VarError::NotPresent) => Ok(()),
        Ok(v) if v == "1" || v == "0" => Ok(()),
        Ok(v) => Err(Failure::config(format!("DSS_LAB_DETERMINISTIC must be 0 or 1, got {v:?}"))),
        Err(e) => Err(Failure::config(format!("DSS_LAB_DETERMINISTIC: {e}"))),
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    check_determinism_env()?;
    match cli.command {
        Command::Run {
            config,
            overrides,
            out,
            seeds,
            jobs,
        } => {
            let mut loaded = Loaded::load(config.as_deref())?;
            loaded.apply_overrides(&overrides)?;
            if let Some(seeds) = seeds {
                loaded.file.experiment.seeds = seeds;
            }
            loaded.validate()?;
            let jobs = match jobs {
                Some(0) => return Err(Failure::config("--jobs must be at least 1")),
                Some(j) => j,
                None => std::thread::available_parallelism().map_or(1, |n| n.get()),
            };
            let out = loaded.output_dir(out.as_deref());
            run::run(&loaded, &out, jobs)
        }
        Command::Verify { config, overrides } => {
            let mut opts = match config {
                Some(p) => Loaded::from_path(&p)?.file.verify,
                None => Default::default(),
            };
            verify::apply_overrides(&mut opts, &overrides)?;
            verify::verify(&opts)
        }
        Command::Analyze { dir, mode } => analyze::analyze(&dir, mode.into()),
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
