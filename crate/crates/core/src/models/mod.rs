//! Vector-field regressors `v_θ(z_t, t | z_T, z_τ, Δ)`.

mod tempo;
mod unet;
pub(crate) use unet::SpatialAttention;
mod vit;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tempo_nn::{Module, Param, Tensor};

pub use tempo::{Tempo, TempoConfig, TimeConditioning, STACK};
pub use unet::{Unet, UnetConfig};
pub use vit::{Vit, VitConfig};

use crate::error::{CoreError, Result};

/// Channel count and grid of the latent fields a regressor consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentGeometry {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Tempo,
    Unet,
    Vit,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Tempo => "tempo",
            ModelKind::Unet => "unet",
            ModelKind::Vit => "vit",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tempo" => Ok(ModelKind::Tempo),
            "unet" | "u-net" => Ok(ModelKind::Unet),
            "vit" => Ok(ModelKind::Vit),
            _ => Err(CoreError::Config(format!("unknown model kind {s:?}"))),
        }
    }
}

/// Architecture choice with its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "hyperparams", rename_all = "lowercase", try_from = "RawModelConfig")]
pub enum ModelConfig {
    Tempo(TempoConfig),
    Unet(UnetConfig),
    Vit(VitConfig),
}

/// Wire form that lets `hyperparams` be omitted or partial.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModelConfig {
    kind: ModelKind,
    #[serde(default)]
    hyperparams: Option<serde_json::Value>,
}

impl TryFrom<RawModelConfig> for ModelConfig {
    type Error = String;

    fn try_from(raw: RawModelConfig) -> std::result::Result<Self, String> {
        fn parse<T: serde::de::DeserializeOwned + Default>(v: Option<serde_json::Value>) -> std::result::Result<T, String> {
            match v {
                None | Some(serde_json::Value::Null) => Ok(T::default()),
                Some(v) => serde_json::from_value(v).map_err(|e| e.to_string()),
            }
        }
        Ok(match raw.kind {
            ModelKind::Tempo => ModelConfig::Tempo(parse(raw.hyperparams)?),
            ModelKind::Unet => ModelConfig::Unet(parse(raw.hyperparams)?),
            ModelKind::Vit => ModelConfig::Vit(parse(raw.hyperparams)?),
        })
    }
}

impl ModelConfig {
    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Tempo => ModelConfig::Tempo(TempoConfig::default()),
            ModelKind::Unet => ModelConfig::Unet(UnetConfig::default()),
            ModelKind::Vit => ModelConfig::Vit(VitConfig::default()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Tempo(_) => ModelKind::Tempo,
            ModelConfig::Unet(_) => ModelKind::Unet,
            ModelConfig::Vit(_) => ModelKind::Vit,
        }
    }

    pub fn validate(&self, geometry: &LatentGeometry) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        match self {
            ModelConfig::Tempo(c) => {
                if c.hidden == 0 || c.projection == 0 || c.depth == 0 || c.embed_dim < 4 || c.n_modes == 0 {
                    return bad(format!("tempo hyperparameters must be positive: {c:?}"));
                }
            }
            ModelConfig::Unet(c) => {
                if c.hidden == 0 || c.channel_mult.is_empty() || c.embed_dim < 4 {
                    return bad(format!("unet hyperparameters must be positive: {c:?}"));
                }
                let f = 1usize << (c.channel_mult.len() - 1);
                if geometry.height % f != 0 || geometry.width % f != 0 {
                    return bad(format!(
                        "latent grid {}x{} is not divisible by the U-Net downsampling factor {f}",
                        geometry.height, geometry.width
                    ));
                }
            }
            ModelConfig::Vit(c) => {
                if c.hidden == 0 || c.heads == 0 || c.hidden % c.heads != 0 || c.patch == 0 {
                    return bad(format!("vit width must be a positive multiple of heads: {c:?}"));
                }
                if geometry.height % c.patch != 0 || geometry.width % c.patch != 0 {
                    return bad(format!(
                        "latent grid {}x{} is not divisible by patch size {}",
                        geometry.height, geometry.width, c.patch
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A built regressor. All variants share the calling convention
/// `forward(z_t, z_ref, z_cond, t, Δ) → velocity` on `[B, C, H, W]` latents.
#[derive(Debug)]
pub enum Regressor {
    Tempo(Tempo),
    Unet(Unet),
    Vit(Vit),
}

impl Regressor {
    /// Deterministic construction from a seed.
    pub fn build(config: &ModelConfig, geometry: LatentGeometry, seed: u64) -> Result<Self> {
        config.validate(&geometry)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match config {
            ModelConfig::Tempo(c) => Regressor::Tempo(Tempo::new(&mut rng, c, geometry)),
            ModelConfig::Unet(c) => Regressor::Unet(Unet::new(&mut rng, c, geometry)),
            ModelConfig::Vit(c) => Regressor::Vit(Vit::new(&mut rng, c, geometry)),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Regressor::Tempo(_) => ModelKind::Tempo,
            Regressor::Unet(_) => ModelKind::Unet,
            Regressor::Vit(_) => ModelKind::Vit,
        }
    }

    pub fn geometry(&self) -> LatentGeometry {
        match self {
            Regressor::Tempo(m) => m.geometry,
            Regressor::Unet(m) => m.geometry,
            Regressor::Vit(m) => m.geometry,
        }
    }

    pub fn forward(&self, z_t: &Tensor, z_ref: &Tensor, z_cond: &Tensor, t: &[f64], delta: &[f64]) -> Tensor {
        let g = self.geometry();
        let s = z_t.shape();
        assert!(
            s.len() == 4 && s[1] == g.channels && z_ref.shape() == s && z_cond.shape() == s,
            "regressor inputs must share shape [B, {}, H, W]; got {:?} / {:?} / {:?}",
            g.channels,
            s,
            z_ref.shape(),
            z_cond.shape()
        );
        assert!(t.len() == s[0] && delta.len() == s[0], "one (t, Δ) pair per batch element");
        match self {
            Regressor::Tempo(m) => m.forward(z_t, z_ref, z_cond, t, delta),
            Regressor::Unet(m) => m.forward(z_t, z_ref, z_cond, t, delta),
            Regressor::Vit(m) => m.forward(z_t, z_ref, z_cond, t, delta),
        }
    }
}

impl Module for Regressor {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        match self {
            Regressor::Tempo(m) => m.visit_params(prefix, f),
            Regressor::Unet(m) => m.visit_params(prefix, f),
            Regressor::Vit(m) => m.visit_params(prefix, f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAPER_LATENT: LatentGeometry = LatentGeometry { channels: 4, height: 16, width: 16 };

    #[test]
    fn default_sizes_are_ordered() {
        let count = |k| Regressor::build(&ModelConfig::default_for(k), PAPER_LATENT, 0).unwrap().param_count();
        let (t, v, u) = (count(ModelKind::Tempo), count(ModelKind::Vit), count(ModelKind::Unet));
        assert!(t < v && v < u, "tempo {t}, vit {v}, unet {u}");
    }

    #[test]
    fn outputs_start_at_zero_and_match_shape() {
        let g = LatentGeometry { channels: 2, height: 8, width: 8 };
        let small = [
            ModelConfig::Tempo(TempoConfig { hidden: 8, projection: 8, depth: 2, embed_dim: 16, n_modes: 3, ..Default::default() }),
            ModelConfig::Unet(UnetConfig { hidden: 8, channel_mult: vec![1, 2], depth: 1, embed_dim: 16, heads: 2, ..Default::default() }),
            ModelConfig::Vit(VitConfig { hidden: 16, depth: 1, mid_depth: 1, heads: 2, patch: 4, mlp_ratio: 2 }),
        ];
        let z = Tensor::from_vec((0..2 * g.numel()).map(|i| (i as f64 * 0.37).sin()).collect(), &[2, 2, 8, 8]);
        for cfg in &small {
            let m = Regressor::build(cfg, g, 1).unwrap();
            let y = m.forward(&z, &z, &z, &[0.2, 0.7], &[1.0, 3.0]);
            assert_eq!(y.shape(), &[2, 2, 8, 8]);
            assert!(y.data().iter().all(|&v| v == 0.0), "{:?} output not zero at init", cfg.kind());
        }
    }

    #[test]
    fn config_parses_kind_and_hyperparams() {
        let c: ModelConfig = serde_yaml::from_str("kind: tempo\nhyperparams:\n  n_modes: 8\n").unwrap();
        assert_eq!(c, ModelConfig::Tempo(TempoConfig { n_modes: 8, ..Default::default() }));
        let c: ModelConfig = serde_yaml::from_str("kind: vit\n").unwrap();
        assert_eq!(c, ModelConfig::default_for(ModelKind::Vit));
        assert!(serde_yaml::from_str::<ModelConfig>("kind: tempo\nhyperparams:\n  n_mode: 8\n").is_err());
        assert!(serde_yaml::from_str::<ModelConfig>("kind: tempo\nextra: 1\n").is_err());
    }

    #[test]
    fn tempo_records_requested_modes() {
        let m = Regressor::build(&ModelConfig::default_for(ModelKind::Tempo), PAPER_LATENT, 0).unwrap();
        let Regressor::Tempo(t) = m else { unreachable!() };
        assert_eq!(t.config.n_modes, 20);
        assert_eq!(t.modes, 8);
    }
}
