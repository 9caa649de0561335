//! Run manifests: every artifact-producing command writes one JSON file
//! beside its outputs recording the exact invocation, seeds, input-config
//! hashes and produced files.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use droopstab::netmodel::NetworkConfig;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub command_line: Vec<String>,
    pub seeds: Vec<u64>,
    pub config_hashes: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub timestamp_unix: u64,
}

impl RunManifest {
    pub fn new(seeds: Vec<u64>) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION"),
            command_line: std::env::args().collect(),
            seeds,
            config_hashes: BTreeMap::new(),
            outputs: Vec::new(),
            timestamp_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn record_config(&mut self, config: &NetworkConfig) {
        let mut hasher = Sha256::new();
        hasher.update(config.to_json().as_bytes());
        self.config_hashes.insert(config.id.clone(), format!("{:x}", hasher.finalize()));
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Write as `<primary output>.manifest.json`, or `manifest.json` inside
    /// a directory.
    pub fn write_beside(&self, primary: &Path) -> anyhow::Result<PathBuf> {
        let path = if primary.is_dir() {
            primary.join("manifest.json")
        } else {
            let mut name = primary.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            primary.with_file_name(name)
        };
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}
