//! Run manifests and atomic output writing.
//!
//! Every command records what it consumed and produced: the argv, the
//! effective configuration, seeds, input content hashes, output paths and
//! wall-clock timings. Numeric outputs are pure functions of (inputs,
//! config, seed); timings live only here so those outputs stay
//! byte-reproducible.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use ifa_core::Result;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// FNV-1a/64 content hashes of every input file.
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub timings_seconds: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            input_hashes: BTreeMap::new(),
            outputs: Vec::new(),
            timings_seconds: BTreeMap::new(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.input_hashes
            .insert(path.display().to_string(), format!("fnv1a64:{:016x}", fnv1a64(&bytes)));
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Writes through a `.partial` file and renames into place, so an
/// interrupted run never leaves a final-named partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut partial = path.as_os_str().to_owned();
    partial.push(".partial");
    let partial = PathBuf::from(partial);
    std::fs::write(&partial, bytes)?;
    std::fs::rename(&partial, path)?;
    Ok(())
}
