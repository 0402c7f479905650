use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use calnet_core::TrainConfig;
use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct DatasetInfo {
    pub path: String,
    /// sha256 over the metadata bytes and the split seed.
    pub fingerprint: String,
    pub records: usize,
    pub train: usize,
    pub test: usize,
}

/// Everything needed to reproduce one output directory. Timestamps and
/// wall-clock times live here and nowhere else.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub command_line: Vec<String>,
    pub version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetInfo>,
    /// Set by `eval` when the data differs from what the checkpoint saw.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fingerprint_mismatch: Option<bool>,
    pub artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub epoch_seconds: Vec<f64>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn new(command: &str, started_unix: f64) -> Self {
        RunManifest {
            command: command.to_string(),
            command_line: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            config: None,
            dataset: None,
            fingerprint_mismatch: None,
            artifacts: Vec::new(),
            epoch_seconds: Vec::new(),
            started_unix,
            finished_unix: started_unix,
        }
    }

    pub fn write(mut self, dir: &Path) -> Result<()> {
        self.finished_unix = unix_now();
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
