//! Reproducibility record written next to every command's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Versions {
    pub colorize: String,
    pub candle: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// sha256 of the effective configuration as JSON.
    pub config_digest: String,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    pub versions: Versions,
    pub started_at: String,
    pub finished_at: String,
    pub status: String,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn start(command: &str, argv: &[String], seed: u64) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            config_digest: digest(&serde_json::Value::Null),
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            versions: Versions {
                colorize: env!("CARGO_PKG_VERSION").to_string(),
                candle: "0.11.0".to_string(),
            },
            started_at: now(),
            finished_at: String::new(),
            status: "running".to_string(),
            error: None,
        }
    }

    pub fn set_config(&mut self, config: &impl Serialize) -> anyhow::Result<()> {
        self.config = serde_json::to_value(config)?;
        self.config_digest = digest(&self.config);
        Ok(())
    }

    pub fn write(&mut self, dir: &Path, error: Option<&anyhow::Error>) -> anyhow::Result<()> {
        self.finished_at = now();
        self.status = if error.is_some() { "failed" } else { "ok" }.to_string();
        self.error = error.map(|e| format!("{e:#}"));
        let path = dir.join(RUN_MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}

fn digest(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}
