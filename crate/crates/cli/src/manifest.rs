//! Run manifests: resolved configuration plus content digests of every
//! input and output, so silent data swaps are detectable.

use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub subcommand: &'static str,
    pub resolved_config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub stats: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path)
        .with_context(|| format!("cannot open '{}' for digest", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_all(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest { path: p.display().to_string(), sha256: sha256_file(p)? })
        })
        .collect()
}

impl Manifest {
    pub fn new(
        subcommand: &'static str,
        resolved_config: serde_json::Value,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        stats: serde_json::Value,
    ) -> Result<Self> {
        Ok(Manifest {
            subcommand,
            resolved_config,
            inputs: digest_all(inputs)?,
            outputs: digest_all(outputs)?,
            stats,
        })
    }

    /// Writes the manifest beside a single-file output (`<out>.manifest.json`)
    /// or into a run directory (`<dir>/manifest.json`).
    pub fn write_for(&self, anchor: &Path) -> Result<PathBuf> {
        let path = if anchor.is_dir() {
            anchor.join("manifest.json")
        } else {
            let mut name = anchor.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            anchor.with_file_name(name)
        };
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, body)
            .with_context(|| format!("cannot write manifest '{}'", path.display()))?;
        Ok(path)
    }
}
