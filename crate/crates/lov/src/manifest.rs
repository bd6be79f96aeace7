//! Run manifests: what was run, on which inputs, with which resolved config.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    /// Arguments after the program name; `lov replay` re-runs them.
    pub argv: Vec<String>,
    pub resolved_config: serde_json::Value,
    pub seed: Option<u64>,
    pub versions: BTreeMap<String, String>,
    /// SHA-256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started_unix: f64,
    pub wall_seconds: f64,
    pub status: String,
    pub error: Option<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects manifest fields while a command runs.
pub struct Recorder {
    pub manifest: RunManifest,
    started: Instant,
}

impl Recorder {
    pub fn new(command: &str, argv: Vec<String>) -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        let mut versions = BTreeMap::new();
        versions.insert("lov".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("lov-core".into(), lov_core::VERSION.into());
        Self {
            manifest: RunManifest {
                schema_version: crate::config::SCHEMA_VERSION,
                command: command.into(),
                argv,
                resolved_config: serde_json::Value::Null,
                seed: None,
                versions,
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                started_unix,
                wall_seconds: 0.0,
                status: "running".into(),
                error: None,
            },
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.manifest.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    pub fn config<T: Serialize>(&mut self, config: &T) {
        self.manifest.resolved_config = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
    }

    pub fn finish(mut self, outcome: &Result<()>, path: &Path) -> Result<()> {
        self.manifest.wall_seconds = self.started.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => self.manifest.status = "ok".into(),
            Err(e) => {
                self.manifest.status = "error".into();
                self.manifest.error = Some(format!("{e:#}"));
            }
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        crate::plots::write_json(path, &self.manifest)
    }
}

pub fn load(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read manifest {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed manifest {}", path.display()))
}
