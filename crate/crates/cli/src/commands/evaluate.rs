use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::json;
use tempo_core::evaluate::{evaluate_next_step, EvalOptions, EvalSummary, Predictor};

use super::{emit, OutArgs, SolverArgs};
use crate::error::{CliError, Result};
use crate::pipeline::{load_dataset, load_model, split_ids, SplitChoice};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    NextStep,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Regressor checkpoint; omit with `--oracle`.
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Autoencoder checkpoint; defaults to `ae.ckpt` beside the model.
    #[arg(long)]
    pub ae: Option<PathBuf>,
    /// Dataset file; repeat to concatenate several.
    #[arg(long, required = true)]
    pub dataset: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "next-step")]
    pub protocol: Protocol,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitChoice,
    /// Score the ground truth itself instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub oracle: bool,
    /// Cut trajectories to this many frames before splitting.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Conditioning window; defaults to the one the model was trained with.
    #[arg(long)]
    pub window: Option<usize>,
    /// Offset of the conditioning frame behind the reference frame.
    #[arg(long)]
    pub delta: Option<usize>,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Examples integrated together.
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}

const DEFAULT_WINDOW: usize = 15;

pub fn run(a: EvaluateArgs, quiet: bool) -> Result<()> {
    let data = load_dataset(&a.dataset, a.seq_len)?;
    let ids = split_ids(data.trajs.len(), a.split)?;
    if ids.is_empty() {
        return Err(CliError::usage(format!("split {:?} of {} trajectories is empty", a.split, data.trajs.len())));
    }
    let trajs = data.arrays(&ids);
    let loaded = match &a.checkpoint {
        Some(p) => Some(load_model(p, a.ae.as_deref())?),
        None => None,
    };
    let run = a.out.create(&a)?;
    let (mut summary, opts, model_info) = match &loaded {
        Some(m) => {
            if m.meta.pde != data.pde() {
                return Err(CliError::usage(format!("model was trained on {} but the dataset holds {}", m.meta.pde, data.pde())));
            }
            let opts = EvalOptions {
                window: a.window.unwrap_or(m.meta.window),
                delta: a.delta.unwrap_or(m.meta.sample.eval_delta),
                seed: a.seed,
                batch: a.batch,
            };
            let path = m.meta.path.schedule()?;
            let solver = a.solver.apply(m.meta.sample.solver_options())?;
            if !quiet {
                eprintln!("evaluating {} trajectories with {:?}", trajs.len(), solver.solver);
            }
            let pred = Predictor::Model { model: &m.model, ae: &m.ae, path: &path, opts: solver.clone() };
            let summary = evaluate_next_step(&pred, &trajs, &opts)?;
            let info = json!({ "model": m.config.kind(), "param_count": m.meta.param_count, "path": m.meta.path, "solver": solver });
            (summary, opts, info)
        }
        None => {
            let opts = EvalOptions { window: a.window.unwrap_or(DEFAULT_WINDOW), delta: a.delta.unwrap_or(1), seed: a.seed, batch: a.batch };
            (evaluate_next_step(&Predictor::Oracle, &trajs, &opts)?, opts, json!({ "model": "oracle" }))
        }
    };
    for r in summary.rows.iter_mut() {
        r.traj = ids[r.traj];
    }
    let metrics = json!({
        "protocol": a.protocol,
        "dataset_fingerprint": data.fingerprint,
        "trajectories": ids,
        "options": opts,
        "predictor": model_info,
        "n_examples": summary.rows.len(),
        "mean": summary.mean,
        "nfe_mean": summary.nfe_mean,
        "per_sample": summary.rows,
    });
    run.write_json("metrics.json", &metrics)?;
    write_metrics_csv(&summary, &run.file("metrics.csv"))?;
    emit(json!({ "run_dir": run.path, "n_examples": summary.rows.len(), "mean": summary.mean, "nfe_mean": summary.nfe_mean }));
    Ok(())
}

fn write_metrics_csv(s: &EvalSummary, path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::new(crate::ErrorKind::Io, format!("{}: {e}", path.display())))?;
    let header = ["traj", "t_ref", "tau", "nfe", "mse", "spectral_mse", "rfne", "psnr", "pearson", "ssim", "density_mse"];
    let csv_err = |e: csv::Error| CliError::new(crate::ErrorKind::Io, format!("{}: {e}", path.display()));
    w.write_record(header).map_err(csv_err)?;
    for r in &s.rows {
        let m = &r.metrics;
        let mut rec = vec![r.traj.to_string(), r.t_ref.to_string(), r.tau.to_string(), r.nfe.to_string()];
        rec.extend([m.mse, m.spectral_mse, m.rfne, m.psnr, m.pearson, m.ssim, m.density_mse].map(|v| format!("{v:.9e}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
