use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one CLI invocation, written next to its outputs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub profile: String,
    pub config_file: Option<String>,
    /// Effective config as a `key = value` document; parses back to the same config.
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub code_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<String>,
    pub exit_code: u8,
}

impl RunManifest {
    pub fn begin(command: &str, args: Vec<String>, profile: &str, config_file: Option<&Path>) -> Self {
        let now = stamp(Utc::now());
        Self {
            command: command.to_string(),
            args,
            profile: profile.to_string(),
            config_file: config_file.map(|p| p.display().to_string()),
            config: None,
            seed: None,
            code_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
            started_at: now.clone(),
            finished_at: now,
            outputs: Vec::new(),
            exit_code: 0,
        }
    }

    pub fn finish(&mut self, outputs: &[PathBuf], exit_code: u8) {
        self.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
        self.exit_code = exit_code;
        self.finished_at = stamp(Utc::now());
    }

    pub fn write(&self, out_dir: &Path) -> anyhow::Result<PathBuf> {
        let path = out_dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn stamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}
