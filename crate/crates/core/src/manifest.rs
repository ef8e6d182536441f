//! Run manifests: every command writes one JSON file next to its outputs
//! recording what ran, with which resolved configuration, over which inputs
//! (by content hash), so any artifact can be traced back and reproduced.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::catalog::file_sha256;
use crate::error::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand name, e.g. "train".
    pub command: String,
    /// Fully resolved configuration after flag / file / default merging.
    pub config: serde_json::Value,
    /// Input path -> sha256 of its bytes, sorted by path.
    pub inputs: BTreeMap<String, String>,
    pub seed: u64,
    pub tool_version: String,
    pub duration_seconds: f64,
}

/// Collects manifest fields over the lifetime of a command.
pub struct RunRecorder {
    command: String,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    seed: u64,
    started: Instant,
}

impl RunRecorder {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        RunRecorder {
            command: command.to_string(),
            config,
            inputs: BTreeMap::new(),
            seed,
            started: Instant::now(),
        }
    }

    /// Fingerprint an input file and record it under its given path.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn finish(self) -> RunManifest {
        RunManifest {
            command: self.command,
            config: self.config,
            inputs: self.inputs,
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            duration_seconds: self.started.elapsed().as_secs_f64(),
        }
    }

    /// Finish and write `<label>.manifest.json` beside the command's output.
    pub fn write(self, path: &Path) -> Result<RunManifest> {
        let manifest = self.finish();
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(manifest)
    }
}

/// Manifest path for an output file: `out.bin` -> `out.bin.manifest.json`.
pub fn manifest_path(output: &Path) -> std::path::PathBuf {
    let mut name = output
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string());
    name.push_str(".manifest.json");
    output.with_file_name(name)
}
