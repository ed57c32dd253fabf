//! Next-step evaluation and physical-space rollouts.

use ndarray::{s, Array3, Array4, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tempo_fields::metrics::{compute_metrics, pearson, MetricReport};
use tempo_fields::FieldTrajectory;

use crate::ae::Autoencoder;
use crate::error::{CoreError, Result};
use crate::models::Regressor;
use crate::paths::PathSchedule;
use crate::sampler::{predict_next, rollout, Conditioning, IntegrationReport, RolloutMode, SolverOptions};
use crate::training::ExampleIndex;

/// Physical frames of a trajectory as `[T, C, H, W]` doubles.
pub fn trajectory_array(t: &FieldTrajectory) -> Array4<f64> {
    t.data.mapv(f64::from)
}

/// What produces next-frame predictions.
pub enum Predictor<'a> {
    Model { model: &'a Regressor, ae: &'a Autoencoder, path: &'a PathSchedule, opts: SolverOptions },
    /// Returns the ground truth; a sanity baseline whose error metrics are 0.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Conditioning window `L`: targets are frames `T + 1` for
    /// `T ∈ {L, …, N − 2}`.
    pub window: usize,
    /// Offset of the conditioning frame, `τ = T − delta`.
    pub delta: usize,
    pub seed: u64,
    /// Examples integrated together as one ODE system.
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub traj: usize,
    pub t_ref: usize,
    pub tau: usize,
    /// Function evaluations spent on the batch holding this example.
    pub nfe: usize,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    pub mean: MetricReport,
    pub nfe_mean: f64,
}

/// Every `(T, τ)` pair of the next-step protocol over `lens` trajectory lengths.
pub fn next_step_examples(lens: &[usize], window: usize, delta: usize) -> Result<Vec<ExampleIndex>> {
    if delta == 0 || delta > window {
        return Err(CoreError::InvalidArgument(format!("eval offset {delta} must lie in 1..={window}")));
    }
    let mut out = Vec::new();
    for (traj, &n) in lens.iter().enumerate() {
        if n < window + 2 {
            return Err(CoreError::InvalidArgument(format!("trajectory {traj} has {n} frames; window {window} needs {}", window + 2)));
        }
        out.extend((window..=n - 2).map(|t_ref| ExampleIndex { traj, t_ref, tau: t_ref - delta }));
    }
    Ok(out)
}

/// Runs the next-step protocol on physical `[T, C, H, W]` trajectories.
pub fn evaluate_next_step(pred: &Predictor<'_>, trajs: &[Array4<f64>], opts: &EvalOptions) -> Result<EvalSummary> {
    if opts.batch == 0 {
        return Err(CoreError::InvalidArgument("eval batch must be ≥ 1".into()));
    }
    let lens: Vec<usize> = trajs.iter().map(|t| t.shape()[0]).collect();
    let examples = next_step_examples(&lens, opts.window, opts.delta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let latents = match pred {
        Predictor::Model { ae, .. } => Some(trajs.iter().map(|t| ae.encode(t.view())).collect::<Result<Vec<_>>>()?),
        Predictor::Oracle => None,
    };
    let mut rows = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(opts.batch) {
        let (frames, nfe) = match (pred, &latents) {
            (Predictor::Model { model, ae, path, opts: solver }, Some(z)) => {
                let pick = |f: &dyn Fn(&ExampleIndex) -> usize| {
                    let views: Vec<_> = chunk.iter().map(|e| z[e.traj].index_axis(Axis(0), f(e))).collect();
                    ndarray::stack(Axis(0), &views).expect("latents share a shape")
                };
                let cond = Conditioning {
                    z_ref: pick(&|e| e.t_ref),
                    z_cond: pick(&|e| e.tau),
                    delta: chunk.iter().map(|e| e.delta() as f64).collect(),
                };
                let (z_next, report) = predict_next(model, path, &cond, solver, &mut rng)?;
                (ae.decode(z_next.view())?, report.nfe)
            }
            _ => {
                let views: Vec<_> = chunk.iter().map(|e| trajs[e.traj].index_axis(Axis(0), e.t_ref + 1)).collect();
                (ndarray::stack(Axis(0), &views).expect("frames share a shape"), 0)
            }
        };
        for (i, e) in chunk.iter().enumerate() {
            let truth = trajs[e.traj].index_axis(Axis(0), e.t_ref + 1);
            let metrics = compute_metrics(&frames.index_axis(Axis(0), i), &truth)?;
            rows.push(EvalRow { traj: e.traj, t_ref: e.t_ref, tau: e.tau, nfe, metrics });
        }
    }
    let reports: Vec<MetricReport> = rows.iter().map(|r| r.metrics.clone()).collect();
    let mean = MetricReport::mean(&reports).expect("at least one example");
    let nfe_mean = rows.iter().map(|r| r.nfe as f64).sum::<f64>() / rows.len() as f64;
    Ok(EvalSummary { rows, mean, nfe_mean })
}

/// A decoded rollout and its per-step diagnostics.
#[derive(Clone, Debug)]
pub struct PhysicalRollout {
    /// Predicted frames `start + 2 …`, `[horizon, C, H, W]`.
    pub frames: Array4<f64>,
    pub reports: Vec<IntegrationReport>,
    /// Pearson correlation against the truth for steps that have one.
    pub pearson: Vec<f64>,
}

/// Rolls out from frames `start` and `start + 1` of a physical trajectory.
#[allow(clippy::too_many_arguments)]
pub fn rollout_physical(
    model: &Regressor,
    ae: &Autoencoder,
    path: &PathSchedule,
    traj: ArrayView4<'_, f64>,
    start: usize,
    horizon: usize,
    mode: RolloutMode,
    opts: &SolverOptions,
    seed: u64,
) -> Result<PhysicalRollout> {
    let n = traj.shape()[0];
    if start + 2 > n {
        return Err(CoreError::InvalidArgument(format!("warm-up frames {start}, {} exceed {n} frames", start + 1)));
    }
    let warm = ae.encode(traj.slice(s![start..start + 2, .., .., ..]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = rollout(
        model,
        path,
        [warm.index_axis(Axis(0), 0), warm.index_axis(Axis(0), 1)],
        horizon,
        mode,
        opts,
        &mut rng,
    )?;
    let frames = ae.decode(res.latents.view())?;
    let mut scores = Vec::new();
    for j in 0..horizon {
        let t = start + 2 + j;
        if t >= n {
            break;
        }
        let p: Array3<f64> = frames.index_axis(Axis(0), j).to_owned();
        scores.push(pearson(&p.view(), &traj.index_axis(Axis(0), t))?);
    }
    Ok(PhysicalRollout { frames, reports: res.reports, pearson: scores })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_enumerates_all_targets() {
        let ex = next_step_examples(&[20, 18], 15, 1).unwrap();
        assert_eq!(ex.len(), 4 + 2);
        assert_eq!((ex[0].t_ref, ex[0].tau), (15, 14));
        assert_eq!(ex.last().unwrap().t_ref, 16);
        assert!(next_step_examples(&[16], 15, 1).is_err());
        assert!(next_step_examples(&[20], 15, 16).is_err());
    }

    #[test]
    fn oracle_scores_zero_error() {
        let t = Array4::from_shape_fn((6, 1, 8, 8), |(t, _, i, j)| ((t + 1) as f64 * 0.3 + i as f64 * 0.7).sin() + j as f64 * 0.1);
        let opts = EvalOptions { window: 2, delta: 1, seed: 0, batch: 3 };
        let s = evaluate_next_step(&Predictor::Oracle, &[t.clone(), t], &opts).unwrap();
        assert_eq!(s.rows.len(), 6);
        assert_eq!(s.mean.mse, 0.0);
        assert_eq!(s.mean.spectral_mse, 0.0);
        assert_eq!(s.mean.rfne, 0.0);
        assert_eq!(s.mean.density_mse, 0.0);
        assert!((s.mean.pearson - 1.0).abs() < 1e-12);
        assert_eq!(s.nfe_mean, 0.0);
    }
}
