use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use tempo_core::config::{PathSection, RunConfig};
use tempo_core::models::ModelConfig;
use tempo_core::paths::{PathFamily, PathSchedule};
use tempo_core::training::{window_from_seq_len, Split};

use super::{emit, OutArgs};
use crate::error::{CliError, ErrorKind, Result};
use crate::pipeline::{load_config_dataset, train_and_save_ae};
use crate::run::RunDir;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Sweep {
    /// Retained Fourier modes of the TempO operator.
    Modes,
    /// Training sequence length.
    Seqlen,
    /// Probability path family.
    Paths,
}

impl Sweep {
    fn default_values(self) -> &'static str {
        match self {
            Sweep::Modes => "1,2,4,8,16",
            Sweep::Seqlen => "2,5,10,15,25",
            Sweep::Paths => "AFFINE,RIVER,SLP,VE,VP",
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub sweep: Sweep,
    /// Base run config; each variant changes one field of it.
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated sweep values.
    #[arg(long)]
    pub values: Option<String>,
    /// Override `train.steps` for every variant.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Worker processes run at once.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Examples integrated together during evaluation.
    #[arg(long, default_value_t = 16)]
    pub eval_batch: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Serialize)]
struct Snapshot<'a> {
    command: &'static str,
    sweep: Sweep,
    values: &'a [String],
    steps: Option<usize>,
    eval_batch: usize,
    config: &'a RunConfig,
}

struct Variant {
    label: String,
    value: String,
    config: RunConfig,
}

fn variants(base: &RunConfig, sweep: Sweep, values: &[String]) -> Result<Vec<Variant>> {
    values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            let bad = |e: String| CliError::usage(format!("sweep value {v:?}: {e}"));
            let label = match sweep {
                Sweep::Modes => {
                    let m: usize = v.parse().map_err(|e| bad(format!("{e}")))?;
                    match &mut c.model {
                        ModelConfig::Tempo(t) => t.n_modes = m,
                        other => return Err(CliError::usage(format!("the modes sweep needs a tempo model, config has {:?}", other.kind()))),
                    }
                    format!("modes-{m}")
                }
                Sweep::Seqlen => {
                    let n: usize = v.parse().map_err(|e| bad(format!("{e}")))?;
                    window_from_seq_len(n).map_err(|e| bad(e.to_string()))?;
                    c.train.seq_len = n;
                    format!("seqlen-{n}")
                }
                Sweep::Paths => {
                    let f: PathFamily = v.parse().map_err(|e: tempo_core::CoreError| bad(e.to_string()))?;
                    c.path = PathSection::from_schedule(&PathSchedule::default_for(f));
                    f.as_str().to_string()
                }
            };
            Ok(Variant { label, value: v.clone(), config: c })
        })
        .collect()
}

/// Runs `tempo <args>` and returns its stdout JSON line.
fn worker(args: &[String]) -> Result<Value> {
    let exe = std::env::current_exe().map_err(|e| CliError::new(ErrorKind::Internal, format!("locating executable: {e}")))?;
    let out = Command::new(&exe)
        .args(args)
        .output()
        .map_err(|e| CliError::new(ErrorKind::Internal, format!("spawning {}: {e}", exe.display())))?;
    if !out.status.success() {
        let stderr = String::from_utf8_lossy(&out.stderr);
        let last = stderr.lines().last().unwrap_or("").to_string();
        let (kind, message) = match serde_json::from_str::<Value>(&last) {
            Ok(v) => (
                ErrorKind::ALL.into_iter().find(|k| v["error"] == k.as_str()).unwrap_or(ErrorKind::Internal),
                v["message"].as_str().unwrap_or_default().to_string(),
            ),
            Err(_) => (ErrorKind::Internal, last),
        };
        return Err(CliError::new(kind, format!("worker `{}` failed: {message}", args.join(" "))));
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(stdout.lines().last().unwrap_or("{}"))
        .map_err(|e| CliError::new(ErrorKind::Internal, format!("worker output is not JSON: {e}")))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::new(ErrorKind::Data, format!("{}: {e}", path.display())))
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

pub fn run(a: AblateArgs, quiet: bool) -> Result<()> {
    if a.jobs == 0 {
        return Err(CliError::usage("--jobs must be ≥ 1"));
    }
    let mut base = RunConfig::load(&a.config)?;
    if let Some(n) = a.steps {
        if n == 0 {
            return Err(CliError::usage("--steps must be ≥ 1"));
        }
        base.train.steps = n;
    }
    let absolute = |p: &PathBuf| std::fs::canonicalize(p).map_err(|e| CliError::io(p, e));
    base.dataset.paths = base.dataset.paths.iter().map(absolute).collect::<Result<_>>()?;
    base.ae.checkpoint = base.ae.checkpoint.as_ref().map(absolute).transpose()?;
    let values: Vec<String> =
        a.values.as_deref().unwrap_or(a.sweep.default_values()).split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    let mut list = variants(&base, a.sweep, &values)?;
    let snapshot = Snapshot { command: "ablate", sweep: a.sweep, values: &values, steps: a.steps, eval_batch: a.eval_batch, config: &base };
    let run = a.out.create(&snapshot)?;

    // One autoencoder shared by every variant, referenced relative to the
    // variant configs so that those files are identical across reruns.
    if base.ae.checkpoint.is_none() {
        let data = load_config_dataset(&base)?;
        let split = Split::new(data.trajs.len())?;
        let ae_dir = RunDir { path: run.file("ae") };
        std::fs::create_dir_all(&ae_dir.path).map_err(|e| CliError::io(&ae_dir.path, e))?;
        if !quiet {
            eprintln!("training shared autoencoder");
        }
        train_and_save_ae(&base, &data, &split, &ae_dir, quiet)?;
        for v in list.iter_mut() {
            v.config.ae.checkpoint = Some(PathBuf::from("../ae/ae.ckpt"));
        }
    }
    let vdir = run.file("variants");
    std::fs::create_dir_all(&vdir).map_err(|e| CliError::io(&vdir, e))?;
    let eval_window = list.iter().map(|v| window_from_seq_len(v.config.train.seq_len)).collect::<tempo_core::Result<Vec<_>>>()?.into_iter().max().unwrap_or(1);

    let jobs: Vec<Vec<Vec<String>>> = list
        .iter()
        .map(|v| -> Result<Vec<Vec<String>>> {
            let cfg_path = vdir.join(format!("{}.yaml", v.label));
            std::fs::write(&cfg_path, v.config.to_yaml()).map_err(|e| CliError::io(&cfg_path, e))?;
            let dir = vdir.join(&v.label);
            let train = vec!["train".into(), "--quiet".into(), "--config".into(), s(&cfg_path), "--run-dir".into(), s(&dir)];
            let mut eval = vec![
                "evaluate".into(),
                "--quiet".into(),
                "--checkpoint".into(),
                s(&dir.join("model.ckpt")),
                "--run-dir".into(),
                s(&dir.join("eval")),
                "--split".into(),
                "test".into(),
                "--window".into(),
                eval_window.to_string(),
                "--batch".into(),
                a.eval_batch.to_string(),
            ];
            for p in &base.dataset.paths {
                eval.extend(["--dataset".into(), s(p)]);
            }
            if let Some(n) = base.dataset.seq_len {
                eval.extend(["--seq-len".into(), n.to_string()]);
            }
            Ok(vec![train, eval])
        })
        .collect::<Result<_>>()?;

    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<CliError>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..a.jobs.min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() || failure.lock().expect("lock").is_some() {
                    break;
                }
                for cmd in &jobs[i] {
                    if !quiet {
                        eprintln!("[{}] {}", list[i].label, cmd[0]);
                    }
                    if let Err(e) = worker(cmd) {
                        failure.lock().expect("lock").get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("lock") {
        return Err(e);
    }

    let mut rows = Vec::new();
    let mut csv = String::from("variant,value,param_count,best_val,mse,spectral_mse,rfne,psnr,pearson,ssim,density_mse,nfe_mean\n");
    for v in &list {
        let dir = vdir.join(&v.label);
        let manifest = read_json(&dir.join("manifest.json"))?;
        let metrics = read_json(&dir.join("eval").join("metrics.json"))?;
        let m = &metrics["mean"];
        let num = |x: &Value| x.as_f64().map(|v| format!("{v:.9e}")).unwrap_or_default();
        csv.push_str(&format!("{},{},{},{}", v.label, v.value, manifest["param_count"], num(&manifest["best_val"])));
        for k in ["mse", "spectral_mse", "rfne", "psnr", "pearson", "ssim", "density_mse"] {
            csv.push_str(&format!(",{}", num(&m[k])));
        }
        csv.push_str(&format!(",{}\n", num(&metrics["nfe_mean"])));
        rows.push(json!({
            "variant": v.label,
            "value": v.value,
            "param_count": manifest["param_count"],
            "best_val": manifest["best_val"],
            "metrics": m,
            "nfe_mean": metrics["nfe_mean"],
        }));
    }
    run.write_text("ablation.csv", &csv)?;
    run.write_json("ablation.json", &json!({ "sweep": a.sweep, "eval_window": eval_window, "variants": rows }))?;
    emit(json!({ "run_dir": run.path, "sweep": a.sweep, "variants": list.len() }));
    Ok(())
}
