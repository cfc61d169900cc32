//! Per-run manifest: command, resolved config and content digests of inputs and outputs.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// Git-style object digest: SHA-256 of `blob <len>\0` followed by the content.
pub fn digest_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(&bytes);
    Ok(hex::encode(h.finalize()))
}

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a RunConfig,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

fn digests(paths: &[PathBuf], base: &Path) -> std::io::Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            let shown = p.strip_prefix(base).unwrap_or(p);
            Ok(FileDigest { path: shown.display().to_string(), sha256: digest_file(p)? })
        })
        .collect()
}

/// Writes `manifest_<command>.json` into the output directory. Output paths are
/// recorded relative to it so reruns elsewhere produce the same manifest.
pub fn write(cfg: &RunConfig, command: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> std::io::Result<PathBuf> {
    let m = Manifest {
        command,
        config: cfg,
        inputs: digests(inputs, Path::new(""))?,
        outputs: digests(outputs, &cfg.out)?,
    };
    let path = cfg.out.join(format!("manifest_{command}.json"));
    let json = serde_json::to_string_pretty(&m).map_err(std::io::Error::other)?;
    std::fs::write(&path, json + "\n")?;
    Ok(path)
}
