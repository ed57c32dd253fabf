//! Binary checkpoints: a versioned JSON header followed by little-endian
//! `f64` parameter blobs in header order.
//!
//! ```text
//! b"TEMPOCKP" | u32 version | u64 header length | header JSON | f64 LE data…
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use tempo_nn::Module;

use crate::ae::{AeConfig, Autoencoder, ChannelStats};
use crate::error::{CoreError, Result};
use crate::models::{LatentGeometry, ModelConfig, Regressor};

pub const MAGIC: &[u8; 8] = b"TEMPOCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: Value,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// Parameters of a module plus the configuration needed to rebuild it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub meta: Value,
    pub tensors: Vec<(TensorEntry, Vec<f64>)>,
}

impl Checkpoint {
    pub fn capture(kind: &str, config: Value, meta: Value, module: &impl Module) -> Self {
        let tensors = module
            .named_params()
            .into_iter()
            .map(|(name, p)| (TensorEntry { name, shape: p.shape().to_vec() }, p.to_vec()))
            .collect();
        Checkpoint { kind: kind.to_string(), config, meta, tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(e, _)| e.clone()).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let n: usize = self.tensors.iter().map(|(_, d)| d.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, d) in &self.tensors {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| CoreError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a tempo checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CoreError::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("invalid header: {e}")))?;
        let mut off = 20 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes.get(off..off + 8 * n).ok_or_else(|| bad(&format!("truncated data for {}", e.name)))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            off += 8 * n;
            tensors.push((e, data));
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after parameter data"));
        }
        Ok(Checkpoint { kind: header.kind, config: header.config, meta: header.meta, tensors })
    }

    /// Writes atomically and returns the SHA-256 of the file contents.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("partial");
        fs::write(&tmp, &bytes).map_err(|e| CoreError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies stored values into `module`; names and shapes must match exactly.
    pub fn restore(&self, module: &impl Module) -> Result<()> {
        let params = module.named_params();
        if params.len() != self.tensors.len() {
            return Err(CoreError::Checkpoint(format!(
                "module has {} parameters, checkpoint has {}",
                params.len(),
                self.tensors.len()
            )));
        }
        for ((name, p), (e, _)) in params.iter().zip(&self.tensors) {
            if *name != e.name || p.shape() != e.shape.as_slice() {
                return Err(CoreError::Checkpoint(format!(
                    "parameter mismatch: module {name} {:?} vs checkpoint {} {:?}",
                    p.shape(),
                    e.name,
                    e.shape
                )));
            }
        }
        for ((_, p), (_, data)) in params.iter().zip(&self.tensors) {
            p.set(data.clone());
        }
        Ok(())
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(CoreError::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)))
        }
    }
}

pub const REGRESSOR_KIND: &str = "regressor";
pub const AUTOENCODER_KIND: &str = "autoencoder";

fn field<T: serde::de::DeserializeOwned>(v: &Value, key: &str) -> Result<T> {
    let raw = v.get(key).ok_or_else(|| CoreError::Checkpoint(format!("header lacks {key}")))?;
    serde_json::from_value(raw.clone()).map_err(|e| CoreError::Checkpoint(format!("bad {key}: {e}")))
}

/// Stores a regressor together with its architecture and latent geometry.
pub fn regressor_checkpoint(model: &Regressor, config: &ModelConfig, meta: Value) -> Checkpoint {
    let cfg = serde_json::json!({ "model": config, "geometry": model.geometry() });
    Checkpoint::capture(REGRESSOR_KIND, cfg, meta, model)
}

pub fn load_regressor(ckpt: &Checkpoint) -> Result<(Regressor, ModelConfig)> {
    ckpt.expect_kind(REGRESSOR_KIND)?;
    let config: ModelConfig = field(&ckpt.config, "model")?;
    let geometry: LatentGeometry = field(&ckpt.config, "geometry")?;
    let model = Regressor::build(&config, geometry, 0)?;
    ckpt.restore(&model)?;
    Ok((model, config))
}

pub fn autoencoder_checkpoint(ae: &Autoencoder, meta: Value) -> Checkpoint {
    let cfg = serde_json::json!({
        "ae": ae.config,
        "physical_channels": ae.physical_channels,
        "input_stats": ae.input_stats,
        "latent_stats": ae.latent_stats,
    });
    Checkpoint::capture(AUTOENCODER_KIND, cfg, meta, ae)
}

pub fn load_autoencoder(ckpt: &Checkpoint) -> Result<Autoencoder> {
    ckpt.expect_kind(AUTOENCODER_KIND)?;
    let config: AeConfig = field(&ckpt.config, "ae")?;
    let channels: usize = field(&ckpt.config, "physical_channels")?;
    let mut ae = Autoencoder::new(&config, channels, 0)?;
    ae.input_stats = field::<ChannelStats>(&ckpt.config, "input_stats")?;
    ae.latent_stats = field::<ChannelStats>(&ckpt.config, "latent_stats")?;
    ckpt.restore(&ae)?;
    Ok(ae)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelKind, TempoConfig};
    use tempo_nn::Tensor;

    fn small_tempo() -> (Regressor, ModelConfig) {
        let cfg = ModelConfig::Tempo(TempoConfig { hidden: 8, projection: 8, depth: 2, embed_dim: 16, ..Default::default() });
        let g = LatentGeometry { channels: 2, height: 8, width: 8 };
        (Regressor::build(&cfg, g, 9).unwrap(), cfg)
    }

    #[test]
    fn reload_is_bit_identical() {
        let (m, cfg) = small_tempo();
        // Perturb the zero-initialized heads so the output is informative.
        for p in m.params() {
            p.update(|w| w.iter_mut().enumerate().for_each(|(i, v)| *v += 1e-2 * ((i % 7) as f64 - 3.0)));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let h1 = regressor_checkpoint(&m, &cfg, Value::Null).save(&path).unwrap();
        let (m2, cfg2) = load_regressor(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(cfg, cfg2);
        let z = Tensor::from_vec((0..2 * 128).map(|i| (i as f64).cos()).collect(), &[2, 2, 8, 8]);
        let a = m.forward(&z, &z, &z, &[0.1, 0.9], &[1.0, 2.0]);
        let b = m2.forward(&z, &z, &z, &[0.1, 0.9], &[1.0, 2.0]);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().any(|&v| v != 0.0));
        let h2 = regressor_checkpoint(&m2, &cfg2, Value::Null).save(&path).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn version_mismatch_is_refused() {
        let (m, cfg) = small_tempo();
        let mut bytes = regressor_checkpoint(&m, &cfg, Value::Null).to_bytes();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CoreError::Version { found: 99, .. })));
        bytes[..8].copy_from_slice(b"NOTACKPT");
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CoreError::Checkpoint(_))));
    }

    #[test]
    fn truncated_file_is_refused() {
        let (m, cfg) = small_tempo();
        let bytes = regressor_checkpoint(&m, &cfg, Value::Null).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn defaults_are_recorded() {
        let g = LatentGeometry { channels: 4, height: 16, width: 16 };
        let cfg = ModelConfig::default_for(ModelKind::Tempo);
        let m = Regressor::build(&cfg, g, 0).unwrap();
        let ck = regressor_checkpoint(&m, &cfg, Value::Null);
        assert_eq!(ck.config["model"]["hyperparams"]["n_modes"], 20);
        assert_eq!(ck.config["model"]["kind"], "tempo");
    }

    #[test]
    fn mismatched_architecture_is_refused() {
        let (m, cfg) = small_tempo();
        let ck = regressor_checkpoint(&m, &cfg, Value::Null);
        let other = Regressor::build(
            &ModelConfig::Tempo(TempoConfig { hidden: 16, projection: 8, depth: 2, embed_dim: 16, ..Default::default() }),
            m.geometry(),
            0,
        )
        .unwrap();
        assert!(ck.restore(&other).is_err());
    }
}
