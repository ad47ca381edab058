//! Run manifests: one immutable JSON snapshot per artifact directory
//! recording exactly what produced it.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use cadirec_core::config::Config;
use cadirec_core::error::{CadirecError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: Option<Config>,
    pub config_fingerprint: Option<String>,
    pub seed: u64,
    pub created_unix: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: Option<&Config>, seed: u64) -> Self {
        RunManifest {
            tool: "cadirec".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: config.cloned(),
            config_fingerprint: config.map(|c| c.fingerprint()),
            seed,
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn with_input(mut self, p: &Path) -> Self {
        self.inputs.push(p.display().to_string());
        self
    }

    pub fn with_output(mut self, p: &Path) -> Self {
        self.outputs.push(p.display().to_string());
        self
    }

    /// Write `manifest.json` into `dir`; refuses to overwrite an existing
    /// manifest (manifests are immutable once written).
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        if path.exists() {
            return Err(CadirecError::Config(format!(
                "{} already contains a manifest; run directories are single-use",
                dir.display()
            )));
        }
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }
}
