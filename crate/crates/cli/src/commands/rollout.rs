use std::path::PathBuf;

use clap::Args;
use ndarray::{s, Array2, Array3, Axis};
use serde::Serialize;
use serde_json::json;
use tempo_core::evaluate::rollout_physical;
use tempo_fields::store::write_dataset;
use tempo_fields::FieldTrajectory;

use super::{emit, ModeArg, OutArgs, SolverArgs};
use crate::error::{CliError, ErrorKind, Result};
use crate::pipeline::{load_dataset, load_model, split_ids, SplitChoice};
use crate::plot::{frame_grid_png, pearson_svg};

/// Columns shown in `frames.png`.
const GRID_COLUMNS: usize = 8;

#[derive(Debug, Args, Serialize)]
pub struct RolloutArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Autoencoder checkpoint; defaults to `ae.ckpt` beside the model.
    #[arg(long)]
    pub ae: Option<PathBuf>,
    /// Dataset file holding the warm-up and reference frames.
    #[arg(long, required = true)]
    pub dataset: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitChoice,
    /// Trajectory position within the split.
    #[arg(long, default_value_t = 0)]
    pub traj: usize,
    /// First warm-up frame; the second is `start + 1`.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// Generated frames; defaults to the model's `sample.horizon`.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Conditioning schedule; defaults to the model's `sample.rollout_mode`.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}

pub fn run(a: RolloutArgs, quiet: bool) -> Result<()> {
    let m = load_model(&a.checkpoint, a.ae.as_deref())?;
    let data = load_dataset(&a.dataset, None)?;
    if m.meta.pde != data.pde() {
        return Err(CliError::usage(format!("model was trained on {} but the dataset holds {}", m.meta.pde, data.pde())));
    }
    let ids = split_ids(data.trajs.len(), a.split)?;
    let &id = ids.get(a.traj).ok_or_else(|| CliError::usage(format!("--traj {} but split {:?} has {} trajectories", a.traj, a.split, ids.len())))?;
    let horizon = a.horizon.unwrap_or(m.meta.sample.horizon);
    if horizon < 2 {
        return Err(CliError::usage("--horizon must be ≥ 2"));
    }
    let mode = a.mode.map(Into::into).unwrap_or(m.meta.sample.rollout_mode);
    let solver = a.solver.apply(m.meta.sample.solver_options())?;
    let path = m.meta.path.schedule()?;
    let source = &data.trajs[id];
    let traj = tempo_core::evaluate::trajectory_array(source);
    let run = a.out.create(&a)?;
    if !quiet {
        eprintln!("rolling out {horizon} frames of trajectory {id} from frame {}", a.start);
    }
    let r = rollout_physical(&m.model, &m.ae, &path, traj.view(), a.start, horizon, mode, &solver, a.seed)?;

    let wrap = |frames: &[Array3<f64>], first: usize| -> Result<FieldTrajectory> {
        let mut t = FieldTrajectory::from_frames(source.pde, frames, source.dt_frame, source.domain)?;
        t.channels = source.channels.clone();
        t.attrs.insert("source_fingerprint".into(), data.fingerprint.clone());
        t.attrs.insert("source_trajectory".into(), id.to_string());
        t.attrs.insert("first_frame".into(), first.to_string());
        Ok(t)
    };
    let first = a.start + 2;
    let pred: Vec<Array3<f64>> = r.frames.outer_iter().map(|f| f.to_owned()).collect();
    write_dataset(&[wrap(&pred, first)?], &run.file("rollout.h5"))?;
    let n_truth = r.pearson.len();
    let truth: Vec<Array3<f64>> = (0..n_truth).map(|j| traj.index_axis(Axis(0), first + j).to_owned()).collect();
    if n_truth >= 2 {
        write_dataset(&[wrap(&truth, first)?], &run.file("truth.h5"))?;
    }

    let mut csv = String::from("step,frame,pearson,nfe,accepted,rejected,min,max\n");
    for (j, rep) in r.reports.iter().enumerate() {
        let f = r.frames.index_axis(Axis(0), j);
        let (lo, hi) = f.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let p = r.pearson.get(j).map(|p| format!("{p:.9}")).unwrap_or_default();
        csv.push_str(&format!("{},{},{p},{},{},{},{lo:.9e},{hi:.9e}\n", j + 1, first + j, rep.nfe, rep.accepted, rep.rejected));
    }
    run.write_text("pearson.csv", &csv)?;
    if !r.pearson.is_empty() {
        pearson_svg(&run.file("pearson.svg"), &r.pearson)?;
    }
    frame_grid_png(&grid_rows(&pred, &truth), &run.file("frames.png"))?;

    let finite = r.frames.iter().all(|v| v.is_finite());
    let (lo, hi) = r.frames.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = m.meta.train_range.unwrap_or_else(|| {
        let (lo, hi) = data.value_range();
        [lo, hi]
    });
    let within_10x = finite && within_scaled_range([lo, hi], range, 10.0);
    let nfe: Vec<usize> = r.reports.iter().map(|x| x.nfe).collect();
    let summary = json!({
        "trajectory": id,
        "start": a.start,
        "horizon": horizon,
        "mode": mode,
        "solver": solver,
        "finite": finite,
        "pred_range": [lo, hi],
        "train_range": range,
        "within_10x": within_10x,
        "steps_with_truth": n_truth,
        "pearson_first": r.pearson.first(),
        "pearson_last": r.pearson.last(),
        "pearson_mean": (n_truth > 0).then(|| r.pearson.iter().sum::<f64>() / n_truth as f64),
        "nfe_total": nfe.iter().sum::<usize>(),
        "nfe_mean": nfe.iter().sum::<usize>() as f64 / nfe.len() as f64,
    });
    run.write_json("rollout.json", &summary)?;
    if !finite {
        return Err(CliError::new(ErrorKind::Numerical, format!("rollout produced non-finite values; artifacts kept in {}", run.path.display())));
    }
    emit(json!({ "run_dir": run.path, "finite": finite, "within_10x": within_10x, "pearson_last": r.pearson.last() }));
    Ok(())
}

/// Whether `[lo, hi]` lies inside `range` widened about its centre by `factor`.
pub fn within_scaled_range([lo, hi]: [f64; 2], range: [f64; 2], factor: f64) -> bool {
    let centre = 0.5 * (range[0] + range[1]);
    let half = 0.5 * (range[1] - range[0]) * factor;
    lo >= centre - half && hi <= centre + half
}

/// Truth and prediction rows of first-channel fields at evenly spaced steps.
fn grid_rows(pred: &[Array3<f64>], truth: &[Array3<f64>]) -> Vec<Vec<Array2<f64>>> {
    let n = pred.len();
    let cols = GRID_COLUMNS.min(n);
    let steps: Vec<usize> = (0..cols).map(|i| if cols == 1 { 0 } else { i * (n - 1) / (cols - 1) }).collect();
    let field = |f: &Array3<f64>| f.slice(s![0, .., ..]).to_owned();
    let mut rows = Vec::new();
    if !truth.is_empty() {
        rows.push(steps.iter().filter(|&&j| j < truth.len()).map(|&j| field(&truth[j])).collect());
    }
    rows.push(steps.iter().map(|&j| field(&pred[j])).collect());
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_range() {
        assert!(within_scaled_range([-1.0, 1.0], [-1.0, 1.0], 1.0));
        assert!(within_scaled_range([-9.0, 11.0], [0.0, 2.0], 10.0));
        assert!(!within_scaled_range([-9.5, 1.0], [0.0, 2.0], 10.0));
    }
}
