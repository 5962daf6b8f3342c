//! Run manifests: what a command read, wrote and was configured with.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use freegrain::io::{header_path, sha256_hex, write_json};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputHash>,
    pub seed: Option<u64>,
    pub version: String,
    pub outputs: Vec<String>,
    pub wall_time_secs: f64,
}

/// Collects a manifest while a command runs.
pub struct Recorder {
    start: Instant,
    command: String,
    inputs: Vec<InputHash>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(command: &str) -> Self {
        Self {
            start: Instant::now(),
            command: command.into(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    /// A dataset file and its header.
    pub fn dataset_input(&mut self, path: &Path) -> Result<()> {
        self.input(path)?;
        self.input(&header_path(path))
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn dataset_output(&mut self, path: &Path) {
        self.output(path);
        self.output(&header_path(path));
    }

    /// Write `<primary>.manifest.json`.
    pub fn finish<C: Serialize>(self, primary: &Path, config: &C, seed: Option<u64>) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            config: serde_json::to_value(config)?,
            inputs: self.inputs,
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            wall_time_secs: self.start.elapsed().as_secs_f64(),
        };
        write_json(&manifest_path(primary), &manifest)?;
        Ok(())
    }
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
