//! `riskagg`: batch frontend for risk factor aggregation, diagnostics,
//! factor model calibration and stress testing.

mod commands;
mod config;
mod error;
mod output;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::LoadedConfig;
use crate::error::CliError;
use crate::output::{OutDir, Stamp};
use crate::pipeline::Run;

#[derive(Parser)]
#[command(name = "riskagg", version, about = "Aggregate risk factors and stress portfolios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rolling-window PCA diagnostics and category verdicts.
    Diagnose(Common),
    /// Ward clustering of the factor columns.
    Cluster(Common),
    /// Aggregated factor series and the reconstruction MSE table.
    Aggregate(Common),
    /// Fit the asset factor model.
    Calibrate(Common),
    /// Evaluate the configured stress scenarios.
    Stress(Common),
    /// Run every stage.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Random seed; overrides `seed` in the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

type Stage = fn(&mut Run, &mut OutDir) -> Result<(), CliError>;

fn execute(common: &Common, stage: Stage) -> Result<Vec<PathBuf>, CliError> {
    let loaded = LoadedConfig::read(&common.config)?;
    let seed = common.seed.unwrap_or(loaded.config.seed);
    let dir = match (&common.out, &loaded.config.out) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => loaded.resolve(d),
        (None, None) => loaded.resolve("out".as_ref()),
    };
    let stamp = Stamp {
        config_sha256: loaded.sha256.clone(),
        seed,
    };
    let mut run = Run::new(loaded, seed)?;
    let mut out = OutDir::create(dir, stamp)?;
    stage(&mut run, &mut out)?;
    Ok(out.written().to_vec())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, stage): (&Common, Stage) = match &cli.command {
        Command::Diagnose(c) => (c, commands::diagnose),
        Command::Cluster(c) => (c, commands::cluster),
        Command::Aggregate(c) => (c, commands::aggregate),
        Command::Calibrate(c) => (c, commands::calibrate),
        Command::Stress(c) => (c, commands::stress),
        Command::Report(c) => (c, commands::report),
    };
    match execute(common, stage) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("riskagg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
