//! Per-invocation `run.json` manifest.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{runtime_err, CliError};

pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub args: Vec<String>,
    /// Config path to the SHA-256 of its contents.
    pub config_hashes: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            args: std::env::args().skip(1).collect(),
            config_hashes: BTreeMap::new(),
            seeds: BTreeMap::new(),
            outputs: Vec::new(),
            wall_clock_seconds: 0.0,
            started: Some(Instant::now()),
        }
    }

    pub fn config(&mut self, path: &Path, contents: &[u8]) {
        let digest = Sha256::digest(contents);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.config_hashes.insert(path.display().to_string(), hex);
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.into(), seed);
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes the manifest to `path`.
    pub fn finish(mut self, path: &Path) -> Result<(), CliError> {
        if let Some(t) = self.started {
            self.wall_clock_seconds = t.elapsed().as_secs_f64();
        }
        let mut text = serde_json::to_string_pretty(&self).map_err(runtime_err)?;
        text.push('\n');
        gss_core::dataset::write_atomic(path, text.as_bytes()).map_err(runtime_err)
    }
}
