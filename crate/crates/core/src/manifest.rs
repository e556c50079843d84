//! Output provenance: atomic file writes, digests, and the `manifest.json`
//! written next to every command's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Writes `bytes` to a temp file in the destination directory, then renames.
pub fn atomic_write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into())
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(sha256_hex(&bytes))
}

/// Provenance record for one command invocation. Field order is fixed and
/// there are no timestamps, so reruns with identical inputs are byte-identical.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub args: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config_sha256: String) -> Self {
        Manifest {
            tool: "dtl".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_sha256,
            inputs: BTreeMap::new(),
            args: BTreeMap::new(),
        }
    }

    pub fn record_input(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let digest = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn record_arg(&mut self, key: &str, value: impl ToString) {
        self.args.insert(key.into(), value.to_string());
    }

    /// Writes `manifest.json` inside `dir`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.write_to(dir.as_ref().join("manifest.json"))
    }

    /// Writes the manifest to an explicit path (used as a sidecar for
    /// single-file outputs).
    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut body = serde_json::to_string_pretty(self)?;
        body.push('\n');
        atomic_write(path, body.as_bytes())
    }
}
