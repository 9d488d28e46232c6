//! Run manifests: the fully resolved invocation, written before any long
//! computation and completed when the run ends.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::args::Command;
use crate::error::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// The invocation with every default and config file inlined; replaying it reproduces the run.
    pub command: Command,
    pub seed: u64,
    pub artifacts: Vec<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn start(command: Command, seed: u64) -> Self {
        Self {
            tool: "noisy-lstm".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command,
            seed,
            artifacts: Vec::new(),
            started_unix: now(),
            finished_unix: None,
            status: "running".into(),
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn finish(&mut self, dir: &Path, artifacts: Vec<PathBuf>, status: &str) -> CliResult<()> {
        self.artifacts = artifacts;
        self.finished_unix = Some(now());
        self.status = status.into();
        self.write(dir)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| noisy_lstm::Error::Data(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)
            .map_err(|e| noisy_lstm::Error::Data(format!("{}: {e}", path.display())))?)
    }
}
