use clap::Args;
use serde::Serialize;
use serde_json::json;
use tempo_fields::generate::{generate_nsv, generate_rd, NsvGenConfig, RdGenConfig};
use tempo_fields::rd::RdParams;
use tempo_fields::store::{dataset_fingerprint, write_dataset};
use tempo_fields::Pde;

use super::{emit, OutArgs};
use crate::error::{CliError, Result};
use crate::run::sha256_file;

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub pde: Pde,
    #[arg(long)]
    pub n_traj: usize,
    /// Square grid size; 64 for NSV and 128 for RD by default.
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub seed: u64,
    /// NSV viscosity.
    #[arg(long, default_value_t = 1e-3)]
    pub nu: f64,
    /// Saved frames per trajectory; 50 for NSV and 100 for RD by default.
    #[arg(long)]
    pub n_frames: Option<usize>,
    /// Solver step; 1e-2 for NSV and 1e-3 for RD by default.
    #[arg(long)]
    pub dt: Option<f64>,
    /// NSV time between saved frames.
    #[arg(long, default_value_t = 1.0)]
    pub dt_frame: f64,
    /// NSV solver grid multiple; frames are spectrally truncated to `--grid`.
    #[arg(long, default_value_t = 1)]
    pub oversample: usize,
    /// NSV forcing amplitude.
    #[arg(long, default_value_t = 0.1)]
    pub forcing: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Serialize)]
#[serde(untagged)]
enum Generator {
    Nsv(NsvGenConfig),
    Rd(RdGenConfig),
}

#[derive(Serialize)]
struct Snapshot {
    command: &'static str,
    pde: Pde,
    n_traj: usize,
    seed: u64,
    generator: Generator,
}

pub fn run(a: GenDataArgs, quiet: bool) -> Result<()> {
    if a.n_traj == 0 {
        return Err(CliError::usage("--n-traj must be ≥ 1"));
    }
    let generator = match a.pde {
        Pde::Nsv => Generator::Nsv(NsvGenConfig {
            grid: a.grid.unwrap_or(64),
            oversample: a.oversample,
            n_frames: a.n_frames.unwrap_or(50),
            dt_frame: a.dt_frame,
            dt: a.dt.unwrap_or(1e-2),
            nu: a.nu,
            forcing: a.forcing,
            ..NsvGenConfig::default()
        }),
        Pde::Rd => Generator::Rd(RdGenConfig {
            grid: a.grid.unwrap_or(128),
            n_frames: a.n_frames.unwrap_or(100),
            params: RdParams { dt: a.dt.unwrap_or(1e-3), ..RdParams::default() },
        }),
        Pde::Swe => return Err(CliError::usage("SWE data is ingested from files, not generated")),
    };
    let snapshot = Snapshot { command: "gen-data", pde: a.pde, n_traj: a.n_traj, seed: a.seed, generator };
    let run = a.out.create(&snapshot)?;
    let n = a.n_traj;
    let progress = |i: usize| {
        if !quiet {
            eprintln!("generated trajectory {}/{n}", i + 1);
        }
    };
    let trajs = match &snapshot.generator {
        Generator::Nsv(c) => generate_nsv(c, n, a.seed, progress)?,
        Generator::Rd(c) => generate_rd(c, n, a.seed, progress)?,
    };
    let path = run.file("dataset.h5");
    write_dataset(&trajs, &path)?;
    let fingerprint = dataset_fingerprint(&trajs);
    let (t, c, h, w) = trajs[0].data.dim();
    let max_cfl = trajs.iter().filter_map(|t| t.attrs.get("max_cfl")?.parse::<f64>().ok()).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    let manifest = json!({
        "pde": a.pde,
        "shape": [n, t, c, h, w],
        "fingerprint": fingerprint,
        "dataset_sha256": sha256_file(&path)?,
        "max_cfl": max_cfl,
    });
    run.write_json("manifest.json", &manifest)?;
    emit(json!({ "run_dir": run.path, "dataset": path, "fingerprint": fingerprint }));
    Ok(())
}
