//! Per-run provenance record written as `manifest.json` next to the
//! artifacts of every command.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub seed: Option<u64>,
    /// Effective configuration, as TOML, or `None` for commands without one.
    pub config: Option<String>,
    /// Content hash over every input (config text, scene manifest,
    /// checkpoint bytes) in the order they were read.
    pub inputs_sha256: String,
    pub inputs: Vec<String>,
    pub artifacts: Vec<Artifact>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub exit_code: i32,
    pub summary: BTreeMap<String, serde_json::Value>,
}

pub fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Accumulates inputs and artifacts while a command runs.
pub struct Recorder {
    pub manifest: RunManifest,
    hasher: Sha256,
    out: PathBuf,
}

impl Recorder {
    pub fn new(command: &str, out: &Path) -> Self {
        Recorder {
            manifest: RunManifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                version: env!("CARGO_PKG_VERSION"),
                seed: None,
                config: None,
                inputs_sha256: String::new(),
                inputs: Vec::new(),
                artifacts: Vec::new(),
                started_unix: now(),
                finished_unix: 0.0,
                exit_code: 0,
                summary: BTreeMap::new(),
            },
            hasher: Sha256::new(),
            out: out.to_path_buf(),
        }
    }

    pub fn input(&mut self, label: impl Into<String>, bytes: &[u8]) {
        let label = label.into();
        self.hasher.update((label.len() as u64).to_le_bytes());
        self.hasher.update(label.as_bytes());
        self.hasher.update((bytes.len() as u64).to_le_bytes());
        self.hasher.update(bytes);
        self.manifest.inputs.push(label);
    }

    /// Writes `bytes` to `name` inside the output directory.
    pub fn artifact(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, bytes)?;
        self.manifest.artifacts.push(Artifact {
            path: path.clone(),
            sha256: hex_sha256(bytes),
        });
        Ok(path)
    }

    pub fn summary(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.manifest.summary.insert(key.to_string(), v);
    }

    pub fn finish(mut self, exit_code: i32) -> std::io::Result<PathBuf> {
        self.manifest.exit_code = exit_code;
        self.manifest.finished_unix = now();
        self.manifest.inputs_sha256 = self.hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
        let path = self.out.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest).map_err(std::io::Error::other)?;
        fs::write(&path, json + "\n")?;
        Ok(path)
    }
}
