//! Run directories and artifact writing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_bytes(&fs::read(path).map_err(|e| CliError::io(path, e))?))
}

/// First 12 hex digits of the SHA-256 of a value's JSON form.
pub fn short_hash(value: &impl Serialize) -> String {
    let json = serde_json::to_string(value).expect("serializable");
    sha256_bytes(json.as_bytes())[..12].to_string()
}

/// An output directory holding one subcommand's artifacts.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Uses `explicit` when given, else `<out>/<UTC timestamp>-<hash>`. The
    /// resolved config is written as `config.yaml`.
    pub fn create(out: &Path, explicit: Option<&Path>, config: &impl Serialize) -> Result<Self> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
                out.join(format!("{stamp}-{}", short_hash(config)))
            }
        };
        fs::create_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
        let run = RunDir { path };
        let yaml = serde_yaml::to_string(config).expect("config serializes");
        run.write_text("config.yaml", &yaml)?;
        Ok(run)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.file(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable");
        text.push('\n');
        self.write_text(name, &text)
    }
}

/// Hashes of every regular file under `dir`, sorted by relative path.
/// `config.yaml` snapshots are skipped: they record absolute input paths,
/// which differ between run directories.
pub fn artifact_hashes(dir: &Path) -> Result<Vec<(String, String)>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
            let p = entry.map_err(|e| CliError::io(dir, e))?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
                if p.file_name().is_some_and(|n| n != "config.yaml") {
                    out.push((rel, sha256_file(&p)?));
                }
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}
