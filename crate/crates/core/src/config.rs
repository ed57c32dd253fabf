//! Strict YAML run configuration.
//!
//! ```yaml
//! dataset: { pde: nsv, paths: [nsv.h5], resolution: 32, seq_len: 30 }
//! model:   { kind: tempo, hyperparams: { n_modes: 8, hidden: 32 } }
//! path:    { family: RIVER, sigma: 0.1, sigma_min: 1.0e-7 }
//! ae:      { depth: 2, base_channels: 8, checkpoint: runs/ae/ae.ckpt }
//! train:   { batch_size: 32, steps: 2000, lr: 1.0e-3, seq_len: 16, seed: 0 }
//! sample:  { rtol: 1.0e-5, atol: 1.0e-5, horizon: 40 }
//! ```
//!
//! Unknown keys anywhere are rejected and `train.seed` is mandatory.
//! Relative file paths resolve against the config file's directory, then
//! against `$TEMPO_DATA_DIR`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tempo_fields::Pde;

use crate::ae::{AeConfig, AeTrainConfig};
use crate::error::{CoreError, Result};
use crate::models::{ModelConfig, ModelKind};
use crate::paths::{PathFamily, PathParams, PathSchedule, VarianceConvention};
use crate::sampler::{RolloutMode, SolverKind, SolverOptions};
use crate::training::TrainConfig;

pub const DATA_DIR_ENV: &str = "TEMPO_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub pde: Pde,
    pub paths: Vec<PathBuf>,
    /// Expected spatial grid (square).
    #[serde(default)]
    pub resolution: Option<usize>,
    /// Frames used per trajectory; all frames when absent.
    #[serde(default)]
    pub seq_len: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSection {
    pub family: PathFamily,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub sigma_min: Option<f64>,
    #[serde(default)]
    pub eps_min: Option<f64>,
    #[serde(default)]
    pub sigma_max: Option<f64>,
    #[serde(default)]
    pub beta_min: Option<f64>,
    #[serde(default)]
    pub beta_max: Option<f64>,
    #[serde(default)]
    pub variance_convention: VarianceConvention,
}

impl PathSection {
    pub fn from_schedule(s: &PathSchedule) -> Self {
        let p = s.params;
        PathSection {
            family: s.family,
            sigma: p.sigma,
            sigma_min: p.sigma_min,
            eps_min: p.eps_min,
            sigma_max: p.sigma_max,
            beta_min: p.beta_min,
            beta_max: p.beta_max,
            variance_convention: s.convention,
        }
    }

    /// Fills absent parameters with the family defaults and validates.
    pub fn schedule(&self) -> Result<PathSchedule> {
        let d = PathSchedule::default_for(self.family).params;
        let params = PathParams {
            sigma: self.sigma.or(d.sigma),
            sigma_min: self.sigma_min.or(d.sigma_min),
            eps_min: self.eps_min.or(d.eps_min),
            sigma_max: self.sigma_max.or(d.sigma_max),
            beta_min: self.beta_min.or(d.beta_min),
            beta_max: self.beta_max.or(d.beta_max),
        };
        PathSchedule::new(self.family, params, self.variance_convention)
    }
}

impl Default for PathSection {
    fn default() -> Self {
        PathSection::from_schedule(&PathSchedule::default_for(PathFamily::River))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeSection {
    pub depth: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub latent_channels: Option<usize>,
    pub groups: usize,
    pub heads: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Pretrained autoencoder used by `train`, `evaluate` and `rollout`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for AeSection {
    fn default() -> Self {
        let a = AeConfig::default();
        let t = AeTrainConfig::default();
        AeSection {
            depth: a.depth,
            base_channels: a.base_channels,
            max_channels: a.max_channels,
            latent_channels: a.latent_channels,
            groups: a.groups,
            heads: a.heads,
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            clip_norm: t.clip_norm,
            checkpoint: None,
        }
    }
}

impl AeSection {
    pub fn arch(&self) -> AeConfig {
        AeConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            max_channels: self.max_channels,
            latent_channels: self.latent_channels,
            groups: self.groups,
            heads: self.heads,
        }
    }

    pub fn training(&self, seed: u64) -> AeTrainConfig {
        AeTrainConfig { steps: self.steps, batch_size: self.batch_size, lr: self.lr, clip_norm: self.clip_norm, seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub solver: SolverKind,
    pub rtol: f64,
    pub atol: f64,
    pub rk4_steps: usize,
    pub horizon: usize,
    pub rollout_mode: RolloutMode,
    /// Offset `Δ = T − τ` used by next-step evaluation.
    pub eval_delta: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        let s = SolverOptions::default();
        SampleSection {
            solver: s.solver,
            rtol: s.rtol,
            atol: s.atol,
            rk4_steps: s.rk4_steps,
            horizon: 40,
            rollout_mode: RolloutMode::Anchored,
            eval_delta: 1,
        }
    }
}

impl SampleSection {
    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions { solver: self.solver, rtol: self.rtol, atol: self.atol, rk4_steps: self.rk4_steps, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub path: PathSection,
    #[serde(default)]
    pub ae: AeSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub sample: SampleSection,
}

fn default_model() -> ModelConfig {
    ModelConfig::default_for(ModelKind::Tempo)
}

fn resolve(p: &Path, base: Option<&Path>) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    if let Some(b) = base {
        let c = b.join(p);
        if c.exists() {
            return c;
        }
    }
    if let Some(root) = std::env::var_os(DATA_DIR_ENV) {
        let c = Path::new(&root).join(p);
        if c.exists() {
            return c;
        }
    }
    base.map(|b| b.join(p)).unwrap_or_else(|| p.to_path_buf())
}

impl RunConfig {
    /// Parses without touching the filesystem.
    pub fn from_yaml(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_yaml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, resolves relative paths and checks that datasets exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let mut cfg = Self::from_yaml(&text)?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty());
        cfg.resolve_paths(base);
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: Option<&Path>) {
        for p in self.dataset.paths.iter_mut() {
            *p = resolve(p, base);
        }
        if let Some(c) = self.ae.checkpoint.as_mut() {
            *c = resolve(c, base);
        }
    }

    pub fn check_files(&self) -> Result<()> {
        for p in &self.dataset.paths {
            if !p.is_file() {
                return Err(CoreError::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.dataset.paths.is_empty() {
            return bad("dataset.paths must list at least one file".into());
        }
        if self.train.batch_size == 0 || self.train.steps == 0 {
            return bad("train.batch_size and train.steps must be ≥ 1".into());
        }
        if let Some(lr) = self.train.lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("train.lr must be finite and ≥ 0, got {lr}"));
            }
        }
        crate::training::window_from_seq_len(self.train.seq_len)?;
        self.path.schedule()?;
        self.sample.solver_options().validate()?;
        if self.sample.horizon == 0 || self.sample.eval_delta == 0 {
            return bad("sample.horizon and sample.eval_delta must be ≥ 1".into());
        }
        if self.ae.depth > 6 || self.ae.base_channels == 0 {
            return bad(format!("ae.depth must be ≤ 6 and ae.base_channels ≥ 1 (got {} / {})", self.ae.depth, self.ae.base_channels));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Canonical JSON of the resolved config.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }

    /// Short content hash used to name run directories.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))[..12].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "dataset: {pde: nsv, paths: [a.h5]}\ntrain: {seed: 3}\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::from_yaml(MINIMAL).unwrap();
        assert_eq!(c.model.kind(), ModelKind::Tempo);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.seq_len, 16);
        assert_eq!(c.path.family, PathFamily::River);
        assert_eq!(c.sample.rtol, 1e-5);
        let s = c.path.schedule().unwrap();
        assert_eq!(s.params.sigma_min, Some(1e-7));
    }

    #[test]
    fn seed_is_mandatory() {
        let e = RunConfig::from_yaml("dataset: {pde: nsv, paths: [a.h5]}\ntrain: {steps: 5}\n").unwrap_err();
        assert!(e.to_string().contains("seed"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        for (text, key) in [
            ("dataset: {pde: nsv, paths: [a.h5]}\ntrain: {seed: 1, stpes: 4}\n", "stpes"),
            ("dataset: {pde: nsv, paths: [a.h5]}\ntrain: {seed: 1}\npath: {family: VP, bta_min: 1}\n", "bta_min"),
            ("dataset: {pde: nsv, paths: [a.h5]}\ntrain: {seed: 1}\nextra: 1\n", "extra"),
            ("dataset: {pde: nsv, paths: [a.h5]}\ntrain: {seed: 1}\nae: {dpeth: 1}\n", "dpeth"),
        ] {
            let e = RunConfig::from_yaml(text).unwrap_err().to_string();
            assert!(e.contains(key), "{e}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        let e = RunConfig::from_yaml("dataset: {pde: nsv, paths: [a.h5]}\ntrain: {seed: 1}\npath: {family: VE, sigma_min: 0.5, sigma_max: 0.1}\n");
        assert!(e.is_err());
        let e = RunConfig::from_yaml("dataset: {pde: nsv, paths: []}\ntrain: {seed: 1}\n");
        assert!(e.is_err());
        let e = RunConfig::from_yaml("dataset: {pde: nsv, paths: [a.h5]}\ntrain: {seed: 1, seq_len: 1}\n");
        assert!(e.is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::from_yaml(MINIMAL).unwrap();
        let b = RunConfig::from_yaml(&MINIMAL.replace("seed: 3", "seed: 4")).unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), RunConfig::from_yaml(&a.to_yaml()).unwrap().hash());
    }

    #[test]
    fn missing_dataset_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.yaml");
        std::fs::write(&p, MINIMAL).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(CoreError::Io { .. })));
        std::fs::write(dir.path().join("a.h5"), b"x").unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.dataset.paths[0], dir.path().join("a.h5"));
    }
}
