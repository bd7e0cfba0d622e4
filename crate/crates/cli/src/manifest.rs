//! `run_manifest.json`: what a run read, how it was configured, and when.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use radpos::{Error, Result};
use serde::Serialize;

use crate::config::{sha256_hex, RunConfig};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub path: PathBuf,
    /// `None` for directories.
    pub sha256: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub config: String,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<PathBuf>,
    pub started_unix_s: u64,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: &RunConfig, seed: Option<u64>) -> Self {
        RunManifest {
            tool: "radpos",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_owned(),
            argv: std::env::args().collect(),
            seed,
            config_hash: config.hash(),
            config: config.to_toml(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let sha256 = if path.is_file() {
            Some(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
        } else {
            None
        };
        self.inputs.push(InputRecord {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
