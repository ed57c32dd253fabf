use std::path::PathBuf;

use clap::Args;
use serde_json::json;
use tempo_core::config::RunConfig;
use tempo_core::training::Split;
use tempo_nn::Module;

use super::{emit, OutArgs};
use crate::error::Result;
use crate::pipeline::{encode_dataset, load_config_dataset, model_meta, obtain_ae, save_model, train_and_save_ae, write_history};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// YAML run config.
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn run_ae(a: TrainArgs, quiet: bool) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let data = load_config_dataset(&cfg)?;
    let split = Split::new(data.trajs.len())?;
    let run = a.out.create(&cfg)?;
    let (ae, sha) = train_and_save_ae(&cfg, &data, &split, &run, quiet)?;
    let z = ae.encode(tempo_core::evaluate::trajectory_array(&data.trajs[0]).view())?;
    let manifest = json!({
        "ae_sha256": sha,
        "dataset_fingerprint": data.fingerprint,
        "param_count": ae.param_count(),
        "latent_shape": z.shape()[1..],
        "split": { "train": split.train.len(), "val": split.val.len(), "test": split.test.len() },
    });
    run.write_json("manifest.json", &manifest)?;
    emit(json!({ "run_dir": run.path, "checkpoint": run.file("ae.ckpt"), "ae_sha256": sha }));
    Ok(())
}

pub fn run(a: TrainArgs, quiet: bool) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let data = load_config_dataset(&cfg)?;
    let split = Split::new(data.trajs.len())?;
    let run = a.out.create(&cfg)?;
    let (ae, ae_sha) = obtain_ae(&cfg, &data, &split, &run, quiet)?;
    let latents = encode_dataset(&ae, &data)?;
    let (model, outcome) = train_model_stage(&cfg, &latents, &split, quiet)?;
    write_history(&outcome.history, &run.file("history.csv"))?;
    let meta = model_meta(&cfg, &data, &split, &ae_sha, &model, &outcome)?;
    let model_sha = save_model(&model, &cfg.model, &meta, &run.file("model.ckpt"))?;
    let final_val = outcome.history.iter().rev().find_map(|r| r.val_loss);
    let manifest = json!({
        "model": cfg.model.kind(),
        "model_sha256": model_sha,
        "ae_sha256": ae_sha,
        "dataset_fingerprint": data.fingerprint,
        "param_count": meta.param_count,
        "initial_val": meta.initial_val,
        "best_val": meta.best_val,
        "best_step": meta.best_step,
        "final_val": final_val,
        "latent_shape": [latents.geometry.channels, latents.geometry.height, latents.geometry.width],
    });
    run.write_json("manifest.json", &manifest)?;
    emit(json!({
        "run_dir": run.path,
        "checkpoint": run.file("model.ckpt"),
        "param_count": meta.param_count,
        "initial_val": meta.initial_val,
        "best_val": meta.best_val,
    }));
    Ok(())
}

fn train_model_stage(
    cfg: &RunConfig,
    latents: &tempo_core::training::LatentSet,
    split: &Split,
    quiet: bool,
) -> Result<(tempo_core::models::Regressor, tempo_core::training::TrainOutcome)> {
    crate::pipeline::train_model_stage(cfg, latents, split, |r| {
        if !quiet {
            if let Some(v) = r.val_loss {
                let t = r.train_loss.map(|t| format!("{t:.4e}")).unwrap_or_else(|| "-".into());
                eprintln!("step {:>5}  train {t}  val {v:.4e}", r.step);
            }
        }
    })
}
