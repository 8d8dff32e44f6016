//! Run manifests: resolved configuration plus a content hash of every input.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    /// Path relative to the input root; this is what enters the hash.
    pub relative: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    /// Hash over the sorted `(relative path, file hash)` list of all inputs.
    pub input_hash: String,
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Hash files, or every file under directories, in sorted order.
pub fn hash_inputs(paths: &[&Path]) -> Result<(Vec<InputDigest>, String)> {
    let mut digests = Vec::new();
    for root in paths {
        let mut files: Vec<PathBuf> = if root.is_dir() {
            WalkDir::new(root)
                .into_iter()
                .filter_map(|e| e.ok())
                .filter(|e| e.file_type().is_file())
                .map(|e| e.into_path())
                .collect()
        } else {
            vec![root.to_path_buf()]
        };
        files.sort();
        for f in files {
            let relative = match f.strip_prefix(root) {
                Ok(r) if !r.as_os_str().is_empty() => r.to_string_lossy().into_owned(),
                _ => f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            };
            digests.push(InputDigest { sha256: file_hash(&f)?, relative, path: f });
        }
    }
    let mut all = Sha256::new();
    for d in &digests {
        all.update(d.relative.as_bytes());
        all.update([0u8]);
        all.update(d.sha256.as_bytes());
    }
    Ok((digests, hex::encode(all.finalize())))
}

pub fn write_manifest(out_dir: &Path, command: &str, seed: Option<u64>, config: serde_json::Value, inputs: &[&Path]) -> Result<()> {
    let (inputs, input_hash) = hash_inputs(inputs)?;
    let m = Manifest {
        command: command.to_string(),
        argv: std::env::args().collect(),
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config,
        inputs,
        input_hash,
    };
    std::fs::create_dir_all(out_dir)?;
    let p = out_dir.join("manifest.json");
    std::fs::write(&p, serde_json::to_vec_pretty(&m)?).with_context(|| format!("writing {}", p.display()))?;
    Ok(())
}
