//! Run manifests: what was run, with which settings, on which inputs, and
//! the digests of everything it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(role: &str, path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            role: role.into(),
            path: path.to_path_buf(),
            sha256: psae::digest::sha256_hex(&bytes),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    /// Resolved settings (config file layered under flags).
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub metrics: Value,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Manifest path that belongs to a primary output file.
pub fn path_for(primary: &Path) -> PathBuf {
    sibling(primary, "manifest.json")
}

/// `dir/name.ext` → `dir/name.ext.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

impl RunManifest {
    pub fn write(&self, primary: &Path) -> Result<PathBuf, CliError> {
        let path = path_for(primary);
        let text = serde_json::to_string_pretty(self).map_err(CliError::internal)?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::new("format", format!("{}: {e}", path.display())))
    }
}

/// If `input` was produced by a recorded run, its digest must still match.
pub fn check_chain(input: &Path) -> Result<(), CliError> {
    let mpath = path_for(input);
    if !mpath.exists() {
        return Ok(());
    }
    let manifest = RunManifest::read(&mpath)?;
    let name = input.file_name();
    let Some(recorded) = manifest.outputs.iter().find(|a| a.path.file_name() == name) else {
        return Ok(());
    };
    let actual = Artifact::of(&recorded.role, input)?;
    if actual.sha256 != recorded.sha256 {
        return Err(CliError::new(
            "integrity",
            format!(
                "{} does not match its manifest {} (sha256 {} vs recorded {})",
                input.display(),
                mpath.display(),
                actual.sha256,
                recorded.sha256
            ),
        ));
    }
    Ok(())
}
