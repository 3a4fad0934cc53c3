//! Experiment runner: strict JSON configs, seeded end-to-end runs and reproducible run directories.

pub mod commands;
pub mod config;
pub mod error;
pub mod rundir;

use std::path::Path;

use clap::{Parser, Subcommand};

pub use config::Config;
pub use error::CliError;
pub use rundir::RunDir;

#[derive(Debug, Parser)]
#[command(name = "gfm", version, about = "Density geodesics, geodesic distillation and flow matching runs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Solve node-based geodesics and compare with the grid oracle.
    Geodesic(#[command(flatten)] Common),
    /// Distill teacher and student corrector networks.
    Distill(#[command(flatten)] Common),
    /// Train velocity fields in the configured interpolant modes.
    TrainFm(#[command(flatten)] Common),
    /// Integrate trained velocity fields from the test sources.
    Sample(#[command(flatten)] Common),
    /// Compute metrics over the run directory.
    Eval(#[command(flatten)] Common),
    /// Run every stage in order.
    Pipeline(#[command(flatten)] Common),
}

#[derive(Debug, Clone, PartialEq, Eq, clap::Args)]
pub struct Common {
    #[arg(long)]
    pub config: std::path::PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Root holding run directories.
    #[arg(long, default_value = "runs")]
    pub out: std::path::PathBuf,
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Geodesic(c)
            | Command::Distill(c)
            | Command::TrainFm(c)
            | Command::Sample(c)
            | Command::Eval(c)
            | Command::Pipeline(c) => c,
        }
    }
}

/// Runs one command against `<out>/<name>`.
pub fn execute(command: &Command) -> Result<std::path::PathBuf, CliError> {
    let c = command.common();
    let cfg = Config::load(&c.config, c.seed)?;
    run_config(command, &cfg, &c.out)
}

pub fn run_config(command: &Command, cfg: &Config, out: &Path) -> Result<std::path::PathBuf, CliError> {
    let mut run = RunDir::open(out, cfg)?;
    match command {
        Command::Geodesic(_) => commands::cmd_geodesic(cfg, &mut run)?,
        Command::Distill(_) => commands::cmd_distill(cfg, &mut run)?,
        Command::TrainFm(_) => commands::cmd_train_fm(cfg, &mut run)?,
        Command::Sample(_) => commands::cmd_sample(cfg, &mut run)?,
        Command::Eval(_) => commands::cmd_eval(cfg, &mut run)?,
        Command::Pipeline(_) => commands::cmd_pipeline(cfg, &mut run)?,
    }
    Ok(run.root().to_path_buf())
}
