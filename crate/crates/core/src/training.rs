//! Sparse-conditioning examples and the flow-matching training loop.

use ndarray::{s, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tempo_nn::ops::mse;
use tempo_nn::optim::Adam;
use tempo_nn::{no_grad, Module, Tensor};

use crate::error::{CoreError, Result};
use crate::models::{LatentGeometry, Regressor};
use crate::paths::PathSchedule;

/// Indices of one sparse-conditioning draw on a trajectory of `N` frames.
///
/// The reference is frame `t_ref`, the conditioning frame `tau`, and the
/// target is frame `t_ref + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleIndex {
    pub traj: usize,
    pub t_ref: usize,
    pub tau: usize,
}

impl ExampleIndex {
    pub fn delta(&self) -> usize {
        self.t_ref - self.tau
    }
}

/// Draws `T` uniformly from `{L, …, N−2}` (the target `T+1` must exist) and
/// `τ` uniformly from `{T−L, …, T−1}`.
pub fn sample_indices(n_frames: usize, window: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if window == 0 {
        return Err(CoreError::InvalidArgument("conditioning window must be ≥ 1".into()));
    }
    if n_frames < window + 2 {
        return Err(CoreError::InvalidArgument(format!(
            "trajectory of {n_frames} frames is too short for window {window} (need ≥ {})",
            window + 2
        )));
    }
    let t_ref = rng.random_range(window..=n_frames - 2);
    let tau = rng.random_range(t_ref - window..t_ref);
    Ok((t_ref, tau))
}

/// Sequence length counts the window plus the frame being predicted.
pub fn window_from_seq_len(seq_len: usize) -> Result<usize> {
    if seq_len < 2 {
        return Err(CoreError::Config(format!("train.seq_len must be ≥ 2, got {seq_len}")));
    }
    Ok(seq_len - 1)
}

/// Contiguous 80/10/10 partition of trajectory ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn new(n: usize) -> Result<Self> {
        let n_train = (0.8 * n as f64).round() as usize;
        let n_val = (0.1 * n as f64).round() as usize;
        if n_train == 0 || n_val == 0 || n_train + n_val >= n {
            return Err(CoreError::InvalidArgument(format!("{n} trajectories cannot form non-empty 80/10/10 splits")));
        }
        Ok(Split { train: (0..n_train).collect(), val: (n_train..n_train + n_val).collect(), test: (n_train + n_val..n).collect() })
    }
}

/// Latent trajectories `[N_frames, C, h, w]`, all of the same geometry.
#[derive(Clone, Debug)]
pub struct LatentSet {
    pub geometry: LatentGeometry,
    pub trajs: Vec<Array4<f64>>,
}

impl LatentSet {
    pub fn new(trajs: Vec<Array4<f64>>) -> Result<Self> {
        let first = trajs.first().ok_or_else(|| CoreError::InvalidArgument("no latent trajectories".into()))?;
        let sh = first.shape();
        let geometry = LatentGeometry { channels: sh[1], height: sh[2], width: sh[3] };
        for t in &trajs {
            if t.shape()[1..] != sh[1..] {
                return Err(CoreError::Shape(format!("latent trajectory {:?} differs from {:?}", t.shape(), sh)));
            }
        }
        Ok(LatentSet { geometry, trajs })
    }

    pub fn subset(&self, ids: &[usize]) -> LatentSet {
        LatentSet { geometry: self.geometry, trajs: ids.iter().map(|&i| self.trajs[i].clone()).collect() }
    }

    pub fn frame(&self, idx: usize, t: usize) -> ndarray::ArrayView3<'_, f64> {
        self.trajs[idx].slice(s![t, .., .., ..])
    }

    pub fn min_frames(&self) -> usize {
        self.trajs.iter().map(|t| t.shape()[0]).min().unwrap_or(0)
    }
}

/// One minibatch of regression inputs and targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub z_t: Tensor,
    pub z_ref: Tensor,
    pub z_cond: Tensor,
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub target: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// The batch concatenated with itself.
    pub fn duplicated(&self) -> Batch {
        let cat = |a: &Tensor| tempo_nn::ops::cat(&[a.clone(), a.clone()], 0);
        Batch {
            z_t: cat(&self.z_t),
            z_ref: cat(&self.z_ref),
            z_cond: cat(&self.z_cond),
            t: [self.t.clone(), self.t.clone()].concat(),
            delta: [self.delta.clone(), self.delta.clone()].concat(),
            target: cat(&self.target),
        }
    }
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Builds path points for the given examples: the data endpoint is the
/// latent `z_{T+1}`, the prior endpoint and `ε` are standard normal, and
/// `t ~ U[0, 1)`.
pub fn build_batch(set: &LatentSet, examples: &[ExampleIndex], path: &PathSchedule, rng: &mut impl Rng) -> Result<Batch> {
    if examples.is_empty() {
        return Err(CoreError::InvalidArgument("empty batch".into()));
    }
    let g = set.geometry;
    let m = g.numel();
    let b = examples.len();
    let (mut zt, mut zr, mut zc, mut tgt) =
        (Vec::with_capacity(b * m), Vec::with_capacity(b * m), Vec::with_capacity(b * m), Vec::with_capacity(b * m));
    let (mut ts, mut ds) = (Vec::with_capacity(b), Vec::with_capacity(b));
    for ex in examples {
        let data: Vec<f64> = set.frame(ex.traj, ex.t_ref + 1).iter().copied().collect();
        let prior = normal_vec(rng, m);
        let eps = normal_vec(rng, m);
        let t: f64 = rng.random_range(0.0..1.0);
        let (z0, z1) = path.assign(&data, &prior);
        let point = path.sample_conditional(z0, z1, t, &eps)?;
        zt.extend_from_slice(&point.z_t);
        tgt.extend_from_slice(&point.u_target);
        zr.extend(set.frame(ex.traj, ex.t_ref).iter().copied());
        zc.extend(set.frame(ex.traj, ex.tau).iter().copied());
        ts.push(t);
        ds.push(ex.delta() as f64);
    }
    let shape = [b, g.channels, g.height, g.width];
    Ok(Batch {
        z_t: Tensor::from_vec(zt, &shape),
        z_ref: Tensor::from_vec(zr, &shape),
        z_cond: Tensor::from_vec(zc, &shape),
        t: ts,
        delta: ds,
        target: Tensor::from_vec(tgt, &shape),
    })
}

/// Draws `count` examples from random trajectories of `set`.
pub fn draw_examples(set: &LatentSet, count: usize, window: usize, rng: &mut impl Rng) -> Result<Vec<ExampleIndex>> {
    if set.trajs.is_empty() {
        return Err(CoreError::InvalidArgument("no trajectories to sample from".into()));
    }
    (0..count)
        .map(|_| {
            let traj = rng.random_range(0..set.trajs.len());
            let (t_ref, tau) = sample_indices(set.trajs[traj].shape()[0], window, rng)?;
            Ok(ExampleIndex { traj, t_ref, tau })
        })
        .collect()
}

/// Mean over batch and elements of `‖v_θ − u‖²` with `ω(t) = 1`.
pub fn flow_matching_loss(model: &Regressor, batch: &Batch) -> Tensor {
    let v = model.forward(&batch.z_t, &batch.z_ref, &batch.z_cond, &batch.t, &batch.delta);
    mse(&v, &batch.target)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    /// Defaults per architecture when absent.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "defaults::seq_len")]
    pub seq_len: usize,
    pub seed: u64,
    #[serde(default = "defaults::clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "defaults::eval_every")]
    pub eval_every: usize,
    #[serde(default = "defaults::val_examples")]
    pub val_examples: usize,
}

mod defaults {
    pub fn batch_size() -> usize {
        32
    }
    pub fn steps() -> usize {
        2000
    }
    pub fn seq_len() -> usize {
        16
    }
    pub fn clip_norm() -> f64 {
        1.0
    }
    pub fn eval_every() -> usize {
        100
    }
    pub fn val_examples() -> usize {
        64
    }
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        TrainConfig {
            batch_size: defaults::batch_size(),
            steps: defaults::steps(),
            lr: None,
            seq_len: defaults::seq_len(),
            seed,
            clip_norm: defaults::clip_norm(),
            eval_every: defaults::eval_every(),
            val_examples: defaults::val_examples(),
        }
    }

    pub fn lr_for(&self, model: &Regressor) -> f64 {
        self.lr.unwrap_or(match model.kind() {
            crate::models::ModelKind::Tempo => 1e-4,
            _ => 5e-5,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    pub best_step: usize,
    pub best_val: f64,
    /// Parameter values at the best validation loss, in `named_params` order.
    pub best_params: Vec<Vec<f64>>,
}

/// Fixed validation batches, drawn once so that every evaluation scores the
/// same examples and noise.
pub fn validation_batches(set: &LatentSet, path: &PathSchedule, cfg: &TrainConfig) -> Result<Vec<Batch>> {
    let window = window_from_seq_len(cfg.seq_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a11);
    let examples = draw_examples(set, cfg.val_examples.max(1), window, &mut rng)?;
    examples.chunks(cfg.batch_size.max(1)).map(|c| build_batch(set, c, path, &mut rng)).collect()
}

pub fn evaluate_loss(model: &Regressor, batches: &[Batch]) -> f64 {
    let _g = no_grad();
    let (mut sum, mut n) = (0.0, 0usize);
    for b in batches {
        sum += flow_matching_loss(model, b).item() * b.len() as f64;
        n += b.len();
    }
    sum / n.max(1) as f64
}

/// Adam training with global-norm clipping. Validation runs at step 0,
/// every `eval_every` steps and at the end; the best parameters are kept.
pub fn train_regressor(
    model: &Regressor,
    train: &LatentSet,
    val: &LatentSet,
    path: &PathSchedule,
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(CoreError::Config("train.batch_size must be ≥ 1".into()));
    }
    if train.geometry != model.geometry() || val.geometry != model.geometry() {
        return Err(CoreError::Shape(format!(
            "latent geometry {:?} does not match the model's {:?}",
            train.geometry,
            model.geometry()
        )));
    }
    let window = window_from_seq_len(cfg.seq_len)?;
    let val_batches = validation_batches(val, path, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr_for(model));
    let params = model.params();
    let snapshot = || params.iter().map(|p| p.to_vec()).collect::<Vec<_>>();

    let v0 = evaluate_loss(model, &val_batches);
    let mut history = vec![HistoryRow { step: 0, train_loss: None, val_loss: Some(v0) }];
    on_row(&history[0]);
    let (mut best_step, mut best_val, mut best_params) = (0, v0, snapshot());
    for step in 1..=cfg.steps {
        let examples = draw_examples(train, cfg.batch_size, window, &mut rng)?;
        let batch = build_batch(train, &examples, path, &mut rng)?;
        let loss = flow_matching_loss(model, &batch);
        let value = loss.item();
        if !value.is_finite() {
            return Err(CoreError::Diverged { step, what: format!("flow-matching loss {value}") });
        }
        let mut grads = loss.backward();
        grads.clip_global_norm(cfg.clip_norm);
        opt.step(&params, &grads);
        let val_loss = (step % cfg.eval_every.max(1) == 0 || step == cfg.steps).then(|| evaluate_loss(model, &val_batches));
        if let Some(v) = val_loss {
            if !v.is_finite() {
                return Err(CoreError::Diverged { step, what: format!("validation loss {v}") });
            }
            if v < best_val {
                (best_step, best_val, best_params) = (step, v, snapshot());
            }
        }
        let row = HistoryRow { step, train_loss: Some(value), val_loss };
        on_row(&row);
        history.push(row);
    }
    Ok(TrainOutcome { history, best_step, best_val, best_params })
}

/// Writes `step,train_loss,val_loss` with empty cells for missing values.
pub fn write_history_csv(rows: &[HistoryRow], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CoreError::Checkpoint(format!("{}: {e}", path.display())))?;
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
    let io = |e: csv::Error| CoreError::Checkpoint(format!("{}: {e}", path.display()));
    w.write_record(["step", "train_loss", "val_loss"]).map_err(io)?;
    for r in rows {
        w.write_record([r.step.to_string(), cell(r.train_loss), cell(r.val_loss)]).map_err(io)?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelConfig, TempoConfig};
    use crate::paths::PathFamily;

    fn toy_set(n_traj: usize, n_frames: usize) -> LatentSet {
        let trajs = (0..n_traj)
            .map(|k| Array4::from_shape_fn((n_frames, 2, 4, 4), |(t, c, i, j)| ((t + k) as f64 * 0.3 + c as f64 + (i * 4 + j) as f64 * 0.1).sin()))
            .collect();
        LatentSet::new(trajs).unwrap()
    }

    fn toy_model() -> Regressor {
        let cfg = ModelConfig::Tempo(TempoConfig { hidden: 8, projection: 8, depth: 2, embed_dim: 16, n_modes: 2, ..Default::default() });
        Regressor::build(&cfg, LatentGeometry { channels: 2, height: 4, width: 4 }, 2).unwrap()
    }

    #[test]
    fn index_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let (t, tau) = sample_indices(17, 15, &mut rng).unwrap();
            assert_eq!(t, 15);
            assert!(tau < 15);
            let (t, tau) = sample_indices(30, 1, &mut rng).unwrap();
            assert_eq!(t - tau, 1);
            assert!((1..=28).contains(&t));
        }
        assert!(sample_indices(16, 15, &mut rng).is_err());
        assert!(sample_indices(10, 0, &mut rng).is_err());
    }

    #[test]
    fn split_counts() {
        let s = Split::new(100).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        let s = Split::new(64).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (51, 6, 7));
        assert!(Split::new(3).is_err());
    }

    #[test]
    fn loss_matches_scalar_loop() {
        let set = toy_set(2, 6);
        let path = PathSchedule::default_for(PathFamily::River);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ex = draw_examples(&set, 3, 2, &mut rng).unwrap();
        let batch = build_batch(&set, &ex, &path, &mut rng).unwrap();
        let model = toy_model();
        for p in model.params() {
            p.update(|w| w.iter_mut().enumerate().for_each(|(i, v)| *v += 0.01 * (i as f64).sin()));
        }
        let loss = flow_matching_loss(&model, &batch).item();
        let v = model.forward(&batch.z_t, &batch.z_ref, &batch.z_cond, &batch.t, &batch.delta);
        let mut acc = 0.0;
        for (a, b) in v.data().iter().zip(batch.target.data()) {
            acc += (a - b) * (a - b);
        }
        let manual = acc / v.numel() as f64;
        assert!((loss - manual).abs() <= 1e-12 * manual.max(1.0));
        let dup = flow_matching_loss(&model, &batch.duplicated()).item();
        assert!((dup - loss).abs() <= 1e-14 * loss.max(1.0));
    }

    #[test]
    fn zero_model_loss_is_target_power() {
        let set = toy_set(2, 6);
        let path = PathSchedule::default_for(PathFamily::River);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ex = draw_examples(&set, 2, 2, &mut rng).unwrap();
        let batch = build_batch(&set, &ex, &path, &mut rng).unwrap();
        let loss = flow_matching_loss(&toy_model(), &batch).item();
        let power = batch.target.data().iter().map(|v| v * v).sum::<f64>() / batch.target.numel() as f64;
        assert!((loss - power).abs() < 1e-14);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let set = toy_set(6, 8);
        let model = toy_model();
        let before: Vec<Vec<f64>> = model.params().iter().map(|p| p.to_vec()).collect();
        let cfg = TrainConfig { steps: 3, lr: Some(0.0), seq_len: 3, batch_size: 2, ..TrainConfig::with_seed(0) };
        train_regressor(&model, &set, &set, &PathSchedule::default_for(PathFamily::River), &cfg, |_| {}).unwrap();
        let after: Vec<Vec<f64>> = model.params().iter().map(|p| p.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn short_training_reduces_validation_loss() {
        let set = toy_set(6, 8);
        let model = toy_model();
        let cfg = TrainConfig { steps: 60, lr: Some(3e-3), seq_len: 3, batch_size: 8, eval_every: 20, val_examples: 16, ..TrainConfig::with_seed(3) };
        let out = train_regressor(&model, &set, &set, &PathSchedule::default_for(PathFamily::River), &cfg, |_| {}).unwrap();
        let first = out.history[0].val_loss.unwrap();
        assert!(out.best_val < first, "{} !< {first}", out.best_val);
        assert_eq!(out.history.len(), 61);
    }
}
