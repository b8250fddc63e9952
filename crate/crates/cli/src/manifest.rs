use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub version: u32,
    pub tool_version: String,
    pub command: String,
    /// SHA-256 of the effective settings as canonical JSON.
    pub config_hash: String,
    pub settings: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_clock_secs: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
    })
}

/// Collects inputs and outputs while a command runs.
pub struct ManifestBuilder {
    command: String,
    settings: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, settings: impl Serialize, seed: Option<u64>) -> Self {
        Self {
            command: command.into(),
            settings: serde_json::to_value(settings).expect("settings serialize"),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, p: impl Into<PathBuf>) {
        self.inputs.push(p.into());
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.outputs.push(p.into());
    }

    /// Writes the manifest to `path` and returns it.
    pub fn finish(self, path: &Path) -> Result<RunManifest> {
        let canonical = serde_json::to_string(&self.settings)?;
        let digests = |paths: &[PathBuf]| paths.iter().map(|p| file_digest(p)).collect::<Result<Vec<_>>>();
        let manifest = RunManifest {
            version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            config_hash: sha256_hex(canonical.as_bytes()),
            settings: self.settings,
            seed: self.seed,
            inputs: digests(&self.inputs)?,
            outputs: digests(&self.outputs)?,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        fs::write(path, serde_json::to_string_pretty(&manifest)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}

/// Manifest location for a file output: `<out>.manifest.json`.
pub fn beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
