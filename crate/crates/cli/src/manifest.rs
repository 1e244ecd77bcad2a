use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::Serialize;
use serde_json::Value;

use crate::io::{manifest_path_for, save_json};

/// Everything needed to re-run a command.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub seed: u64,
    pub version: String,
    pub started: String,
    pub finished: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

pub struct RunClock {
    started: chrono::DateTime<chrono::Utc>,
}

impl RunClock {
    pub fn start() -> Self {
        Self {
            started: chrono::Utc::now(),
        }
    }

    pub fn elapsed_secs(&self) -> f64 {
        (chrono::Utc::now() - self.started).as_seconds_f64()
    }

    pub fn finish(
        &self,
        command: &str,
        config: Value,
        seed: u64,
        inputs: &[&Path],
        out: &Path,
        out_is_dir: bool,
    ) -> Result<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started: self.started.to_rfc3339(),
            finished: chrono::Utc::now().to_rfc3339(),
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            outputs: vec![out.to_path_buf()],
        };
        save_json(&manifest_path_for(out, out_is_dir), &manifest)
    }
}
