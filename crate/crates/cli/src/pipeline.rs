//! Data loading and the training stages shared by several subcommands.

use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array4, Axis};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tempo_core::ae::{train_autoencoder, AeHistoryRow, Autoencoder};
use tempo_core::checkpoint::{autoencoder_checkpoint, load_autoencoder, load_regressor, regressor_checkpoint, Checkpoint};
use tempo_core::config::{PathSection, RunConfig, SampleSection};
use tempo_core::evaluate::trajectory_array;
use tempo_core::models::{ModelConfig, Regressor};
use tempo_core::training::{train_regressor, window_from_seq_len, HistoryRow, LatentSet, Split, TrainOutcome};
use tempo_fields::store::{dataset_fingerprint, read_dataset};
use tempo_fields::{FieldTrajectory, Pde};
use tempo_nn::Module;

use crate::error::{CliError, ErrorKind, Result};
use crate::run::{sha256_file, RunDir};

/// XOR-ed into the run seed for autoencoder initialization and batching.
const AE_SEED_SALT: u64 = 0xae00_0000_0000_00ae;

pub struct Dataset {
    pub trajs: Vec<FieldTrajectory>,
    pub fingerprint: String,
}

impl Dataset {
    pub fn pde(&self) -> Pde {
        self.trajs[0].pde
    }

    pub fn arrays(&self, ids: &[usize]) -> Vec<Array4<f64>> {
        ids.iter().map(|&i| trajectory_array(&self.trajs[i])).collect()
    }

    /// All frames of the selected trajectories stacked along the first axis.
    pub fn frames(&self, ids: &[usize]) -> Array4<f64> {
        let arrays = self.arrays(ids);
        let views: Vec<_> = arrays.iter().map(|a| a.view()).collect();
        concatenate(Axis(0), &views).expect("trajectories share a frame shape")
    }

    /// Smallest and largest value over every frame.
    pub fn value_range(&self) -> (f64, f64) {
        self.trajs.iter().map(|t| t.value_range()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| {
            (lo.min(a as f64), hi.max(b as f64))
        })
    }
}

/// Reads and concatenates dataset files. Trajectories are cut to `seq_len`
/// frames when given.
pub fn load_dataset(paths: &[PathBuf], seq_len: Option<usize>) -> Result<Dataset> {
    let mut trajs = Vec::new();
    for p in paths {
        if !p.is_file() {
            return Err(CliError::new(ErrorKind::MissingFile, format!("{}: dataset file not found", p.display())));
        }
        trajs.extend(read_dataset(p)?);
    }
    let first = trajs.first().ok_or_else(|| CliError::new(ErrorKind::Data, "no trajectories in dataset"))?;
    let (pde, shape) = (first.pde, first.frame_shape());
    if let Some(bad) = trajs.iter().find(|t| t.pde != pde || t.frame_shape() != shape) {
        return Err(CliError::new(
            ErrorKind::Data,
            format!("mixed datasets: {} {:?} vs {} {:?}", pde, shape, bad.pde, bad.frame_shape()),
        ));
    }
    if let Some(n) = seq_len {
        trajs = trajs.iter().map(|t| t.truncated(n)).collect::<tempo_fields::Result<_>>()?;
    }
    let fingerprint = dataset_fingerprint(&trajs);
    Ok(Dataset { trajs, fingerprint })
}

pub fn load_config_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let data = load_dataset(&cfg.dataset.paths, cfg.dataset.seq_len)?;
    if data.pde() != cfg.dataset.pde {
        return Err(CliError::new(ErrorKind::Config, format!("dataset.pde is {} but files hold {}", cfg.dataset.pde, data.pde())));
    }
    if let Some(r) = cfg.dataset.resolution {
        let (_, h, w) = data.trajs[0].frame_shape();
        if (h, w) != (r, r) {
            return Err(CliError::new(ErrorKind::Config, format!("dataset.resolution is {r} but frames are {h}x{w}")));
        }
    }
    Ok(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeMeta {
    pub pde: Pde,
    pub dataset_fingerprint: String,
    pub steps: usize,
    pub seed: u64,
    pub val_rel_error: Option<f64>,
}

pub fn train_ae_stage(
    cfg: &RunConfig,
    data: &Dataset,
    split: &Split,
    mut log: impl FnMut(&AeHistoryRow),
) -> Result<(Autoencoder, Vec<AeHistoryRow>)> {
    let seed = cfg.seed() ^ AE_SEED_SALT;
    let channels = data.trajs[0].frame_shape().0;
    let mut ae = Autoencoder::new(&cfg.ae.arch(), channels, seed)?;
    let train = data.frames(&split.train);
    let val = (!split.val.is_empty()).then(|| data.frames(&split.val));
    let history =
        train_autoencoder(&mut ae, train.view(), val.as_ref().map(|v| v.view()), &cfg.ae.training(seed), cfg.train.eval_every, &mut log)?;
    Ok((ae, history))
}

pub fn write_ae_history(rows: &[AeHistoryRow], path: &Path) -> Result<()> {
    let mut text = String::from("step,train_loss,val_rel_error\n");
    for r in rows {
        let v = r.val_rel_error.map(|v| format!("{v:.9e}")).unwrap_or_default();
        text.push_str(&format!("{},{:.9e},{v}\n", r.step, r.train_loss));
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Trains an autoencoder into `run/ae.ckpt` and returns it with its hash.
pub fn train_and_save_ae(cfg: &RunConfig, data: &Dataset, split: &Split, run: &RunDir, quiet: bool) -> Result<(Autoencoder, String)> {
    let (ae, history) = train_ae_stage(cfg, data, split, |r| {
        if !quiet {
            if let Some(v) = r.val_rel_error {
                eprintln!("ae step {:>5}  loss {:.4e}  val rel err {:.4}", r.step, r.train_loss, v);
            }
        }
    })?;
    write_ae_history(&history, &run.file("ae_history.csv"))?;
    let meta = AeMeta {
        pde: data.pde(),
        dataset_fingerprint: data.fingerprint.clone(),
        steps: cfg.ae.steps,
        seed: cfg.seed(),
        val_rel_error: history.last().and_then(|r| r.val_rel_error),
    };
    let sha = autoencoder_checkpoint(&ae, serde_json::to_value(&meta).expect("meta serializes")).save(&run.file("ae.ckpt"))?;
    Ok((ae, sha))
}

/// Uses `ae.checkpoint` when configured (copied into the run), otherwise
/// trains a fresh autoencoder.
pub fn obtain_ae(cfg: &RunConfig, data: &Dataset, split: &Split, run: &RunDir, quiet: bool) -> Result<(Autoencoder, String)> {
    match &cfg.ae.checkpoint {
        Some(p) => {
            let ae = load_autoencoder(&Checkpoint::load(p)?)?;
            let dst = run.file("ae.ckpt");
            std::fs::copy(p, &dst).map_err(|e| CliError::io(p, e))?;
            Ok((ae, sha256_file(&dst)?))
        }
        None => train_and_save_ae(cfg, data, split, run, quiet),
    }
}

/// Encodes every trajectory into normalized latents.
pub fn encode_dataset(ae: &Autoencoder, data: &Dataset) -> Result<LatentSet> {
    let latents = data.trajs.iter().map(|t| ae.encode(trajectory_array(t).view())).collect::<tempo_core::Result<Vec<_>>>()?;
    Ok(LatentSet::new(latents)?)
}

/// Everything needed to sample from a trained regressor, stored with it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub pde: Pde,
    pub path: PathSection,
    pub seq_len: usize,
    pub window: usize,
    pub sample: SampleSection,
    pub ae_sha256: String,
    pub dataset_fingerprint: String,
    pub seed: u64,
    pub param_count: usize,
    pub initial_val: f64,
    pub best_val: f64,
    pub best_step: usize,
    /// Smallest and largest physical value over the training split.
    #[serde(default)]
    pub train_range: Option<[f64; 2]>,
}

impl ModelMeta {
    pub fn from_value(v: &Value) -> Result<Self> {
        serde_json::from_value(v.clone()).map_err(|e| CliError::new(ErrorKind::Checkpoint, format!("model metadata: {e}")))
    }
}

pub fn write_history(rows: &[HistoryRow], path: &Path) -> Result<()> {
    Ok(tempo_core::training::write_history_csv(rows, path)?)
}

/// Trains the configured regressor on `latents` and restores the parameters
/// with the best validation loss.
pub fn train_model_stage(
    cfg: &RunConfig,
    latents: &LatentSet,
    split: &Split,
    log: impl FnMut(&HistoryRow),
) -> Result<(Regressor, TrainOutcome)> {
    let model = Regressor::build(&cfg.model, latents.geometry, cfg.seed())?;
    let schedule = cfg.path.schedule()?;
    let (train, val) = (latents.subset(&split.train), latents.subset(&split.val));
    let out = train_regressor(&model, &train, &val, &schedule, &cfg.train, log)?;
    for (p, v) in model.params().iter().zip(&out.best_params) {
        p.set(v.clone());
    }
    Ok((model, out))
}

pub fn model_meta(cfg: &RunConfig, data: &Dataset, split: &Split, ae_sha: &str, model: &Regressor, out: &TrainOutcome) -> Result<ModelMeta> {
    let train_range = split.train.iter().map(|&i| data.trajs[i].value_range()).fold(None, |acc: Option<[f64; 2]>, (a, b)| {
        let (a, b) = (a as f64, b as f64);
        Some(acc.map_or([a, b], |[lo, hi]| [lo.min(a), hi.max(b)]))
    });
    Ok(ModelMeta {
        pde: data.pde(),
        path: cfg.path.clone(),
        seq_len: cfg.train.seq_len,
        window: window_from_seq_len(cfg.train.seq_len)?,
        sample: cfg.sample.clone(),
        ae_sha256: ae_sha.to_string(),
        dataset_fingerprint: data.fingerprint.clone(),
        seed: cfg.seed(),
        param_count: model.param_count(),
        initial_val: out.history[0].val_loss.unwrap_or(f64::NAN),
        best_val: out.best_val,
        best_step: out.best_step,
        train_range,
    })
}

pub fn save_model(model: &Regressor, config: &ModelConfig, meta: &ModelMeta, path: &Path) -> Result<String> {
    Ok(regressor_checkpoint(model, config, serde_json::to_value(meta).expect("meta serializes")).save(path)?)
}

pub struct LoadedModel {
    pub model: Regressor,
    pub config: ModelConfig,
    pub meta: ModelMeta,
    pub ae: Autoencoder,
}

/// Loads a regressor and its autoencoder (`ae.ckpt` next to the checkpoint
/// unless `ae_path` is given); the autoencoder hash must match the one
/// recorded at training time.
pub fn load_model(ckpt_path: &Path, ae_path: Option<&Path>) -> Result<LoadedModel> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let (model, config) = load_regressor(&ckpt)?;
    let meta = ModelMeta::from_value(&ckpt.meta)?;
    let default_ae = ckpt_path.parent().unwrap_or(Path::new(".")).join("ae.ckpt");
    let ae_file = ae_path.unwrap_or(&default_ae);
    let sha = sha256_file(ae_file)?;
    if sha != meta.ae_sha256 {
        return Err(CliError::new(
            ErrorKind::Checkpoint,
            format!("{} (sha256 {}) is not the autoencoder this model was trained with ({})", ae_file.display(), &sha[..12], &meta.ae_sha256[..12.min(meta.ae_sha256.len())]),
        ));
    }
    let ae = load_autoencoder(&Checkpoint::load(ae_file)?)?;
    Ok(LoadedModel { model, config, meta, ae })
}

/// Trajectory indices selected by `--split`.
pub fn split_ids(n: usize, which: SplitChoice) -> Result<Vec<usize>> {
    Ok(match which {
        SplitChoice::All => (0..n).collect(),
        SplitChoice::Train => Split::new(n)?.train,
        SplitChoice::Val => Split::new(n)?.val,
        SplitChoice::Test => Split::new(n)?.test,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitChoice {
    Train,
    Val,
    Test,
    All,
}
