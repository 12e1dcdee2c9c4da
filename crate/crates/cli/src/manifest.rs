//! Run manifests: every command records its resolved configuration,
//! seeds, input digests and outputs next to whatever it wrote, so any
//! result can be traced back to the exact invocation that produced it.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seeds: Vec<u64>,
    /// Fully resolved configuration after file and flag merging.
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: &str, config: serde_json::Value, seeds: Vec<u64>) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: now_unix(),
            finished_unix: 0,
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path)
            .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes `manifest.json` into `out_dir`.
    pub fn finish(mut self, out_dir: &Path) -> Result<(), CliError> {
        self.finished_unix = now_unix();
        let path = out_dir.join("manifest.json");
        let body = serde_json::to_string_pretty(&self)
            .map_err(|e| CliError::Usage(format!("cannot serialize manifest: {e}")))?;
        fs::write(&path, body + "\n")
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }
}

/// Creates the output directory if needed and returns the path of a
/// file inside it.
pub fn out_file(out_dir: &Path, name: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    Ok(out_dir.join(name))
}

pub fn write_text(path: &Path, body: &str) -> Result<(), CliError> {
    fs::write(path, body).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Usage(format!("cannot serialize {}: {e}", path.display())))?;
    write_text(path, &(body + "\n"))
}
