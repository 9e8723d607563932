use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRecord {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub config_hash: String,
    pub seed: u64,
    pub wall_clock_s: f64,
    pub files: Vec<FileRecord>,
}

/// One entry per command that has written into the output directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

impl RunManifest {
    /// Existing manifest in `dir`, or an empty one.
    pub fn load_or_default(dir: &Path) -> Result<RunManifest> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").into(),
                ..RunManifest::default()
            });
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            message: e.to_string(),
        })?;
        m.tool_version = env!("CARGO_PKG_VERSION").into();
        Ok(m)
    }

    /// Hashes `files` (either under `dir` or relative to it) into the stage entry.
    pub fn record(
        &mut self,
        dir: &Path,
        stage: &str,
        config_hash: &str,
        seed: u64,
        wall_clock_s: f64,
        files: &[PathBuf],
    ) -> Result<()> {
        let mut records = Vec::with_capacity(files.len());
        for f in files {
            let abs = if f.is_absolute() || f.starts_with(dir) {
                f.clone()
            } else {
                dir.join(f)
            };
            let rel = abs.strip_prefix(dir).unwrap_or(&abs);
            let (sha256, bytes) = sha256_file(&abs)?;
            records.push(FileRecord {
                path: rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/"),
                sha256,
                bytes,
            });
        }
        records.sort_by(|a, b| a.path.cmp(&b.path));
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                config_hash: config_hash.to_string(),
                seed,
                wall_clock_s,
                files: records,
            },
        );
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Re-hashes every listed file; mismatches and missing files are errors.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for (stage, rec) in &self.stages {
            for f in &rec.files {
                let path = dir.join(&f.path);
                let (sha, bytes) = sha256_file(&path)?;
                if sha != f.sha256 || bytes != f.bytes {
                    return Err(Error::domain(format!(
                        "{stage}: {} changed since it was recorded",
                        f.path
                    )));
                }
            }
        }
        Ok(())
    }
}
