//! Run manifests: resolved config, seed, data fingerprint and a hash of every
//! artifact written by the run.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub config: BTreeMap<String, String>,
    /// `--set` overrides exactly as given.
    pub overrides: Vec<String>,
    pub data_fingerprint: String,
    /// Relative path to SHA-256 of every file under the run directory.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig, overrides: &[String], data_fingerprint: &str) -> Self {
        Self {
            format: "mars-manifest".into(),
            version: 1,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: cfg.train.seed,
            config_fingerprint: cfg.fingerprint(),
            config: cfg.pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            overrides: overrides.to_vec(),
            data_fingerprint: data_fingerprint.into(),
            artifacts: BTreeMap::new(),
        }
    }

    /// Hashes every file under `dir` and writes `dir/manifest.json`.
    pub fn write(mut self, dir: &Path) -> std::io::Result<PathBuf> {
        self.artifacts = hash_tree(dir)?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&self).map_err(std::io::Error::other)?)?;
        Ok(path)
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Files under `dir` (recursively, sorted), excluding the manifest itself.
pub fn list_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.strip_prefix(dir).map(|r| r != Path::new(MANIFEST_FILE)).unwrap_or(true) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn hash_tree(dir: &Path) -> std::io::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in list_files(dir)? {
        let rel = p.strip_prefix(dir).unwrap_or(&p).to_string_lossy().replace('\\', "/");
        out.insert(rel, sha256_file(&p)?);
    }
    Ok(out)
}
