mod ablate;
mod evaluate;
mod gen;
mod rollout;
mod spectra;
mod train;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tempo_core::sampler::{RolloutMode, SolverKind, SolverOptions};

pub use ablate::{AblateArgs, Sweep};
pub use evaluate::EvaluateArgs;
pub use gen::GenDataArgs;
pub use rollout::RolloutArgs;
pub use spectra::SpectraArgs;
pub use train::TrainArgs;

use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "tempo", version, about = "Latent flow-matching forecasts for 2D PDE fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an NSV or RD trajectory dataset.
    GenData(GenDataArgs),
    /// Train the autoencoder described by a run config.
    TrainAe(TrainArgs),
    /// Train a velocity regressor (and its autoencoder unless one is given).
    Train(TrainArgs),
    /// Score a checkpoint under the next-step protocol.
    Evaluate(EvaluateArgs),
    /// Autoregressive forecast from two warm-up frames.
    Rollout(RolloutArgs),
    /// Energy spectra and truncation curves of predictions against truth.
    Spectra(SpectraArgs),
    /// Train and evaluate a sweep of config variants.
    Ablate(AblateArgs),
}

/// Where a subcommand writes its run directory.
#[derive(Clone, Debug, Args)]
pub struct OutArgs {
    /// Parent of timestamped run directories.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Exact run directory, overriding `--out`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

impl OutArgs {
    pub fn create(&self, snapshot: &impl Serialize) -> Result<crate::run::RunDir> {
        crate::run::RunDir::create(&self.out, self.run_dir.as_deref(), snapshot)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SolverArg {
    Dopri5,
    Rk4,
}

impl From<SolverArg> for SolverKind {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Dopri5 => SolverKind::Dopri5,
            SolverArg::Rk4 => SolverKind::Rk4,
        }
    }
}

/// Solver overrides; unset fields keep the values stored with the model.
#[derive(Clone, Debug, Default, Args, Serialize)]
pub struct SolverArgs {
    #[arg(long, value_enum)]
    pub solver: Option<SolverArg>,
    #[arg(long)]
    pub rtol: Option<f64>,
    #[arg(long)]
    pub atol: Option<f64>,
    #[arg(long)]
    pub rk4_steps: Option<usize>,
}

impl SolverArgs {
    pub fn apply(&self, base: SolverOptions) -> Result<SolverOptions> {
        let o = SolverOptions {
            solver: self.solver.map(Into::into).unwrap_or(base.solver),
            rtol: self.rtol.unwrap_or(base.rtol),
            atol: self.atol.unwrap_or(base.atol),
            rk4_steps: self.rk4_steps.unwrap_or(base.rk4_steps),
            ..base
        };
        o.validate()?;
        Ok(o)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Anchored,
    Sliding,
}

impl From<ModeArg> for RolloutMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Anchored => RolloutMode::Anchored,
            ModeArg::Sliding => RolloutMode::Sliding,
        }
    }
}

/// Prints the one-line JSON result of a subcommand on stdout.
pub(crate) fn emit(value: serde_json::Value) {
    println!("{value}");
}

pub fn run(cli: Cli) -> Result<()> {
    let quiet = cli.quiet;
    match cli.command {
        Command::GenData(a) => gen::run(a, quiet),
        Command::TrainAe(a) => train::run_ae(a, quiet),
        Command::Train(a) => train::run(a, quiet),
        Command::Evaluate(a) => evaluate::run(a, quiet),
        Command::Rollout(a) => rollout::run(a, quiet),
        Command::Spectra(a) => spectra::run(a),
        Command::Ablate(a) => ablate::run(a, quiet),
    }
}
