// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run manifests and JSON config overlays.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to replay a command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved configuration, defaults included.
    pub config: Value,
    pub seed: u64,
    pub tool_version: String,
    /// Path to SHA-256 hex digest.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digests of `paths`; directories contribute each regular file they hold.
pub fn digests(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|e| e.is_file() && e.file_name().is_some_and(|n| n != MANIFEST_FILE))
                .collect();
            entries.sort();
            for e in entries {
                out.insert(e.display().to_string(), file_digest(&e)?);
            }
        } else {
            out.insert(p.display().to_string(), file_digest(p)?);
        }
    }
    Ok(out)
}

pub struct ManifestBuilder {
    command: &'static str,
    config: Value,
    seed: u64,
    started: u64,
}

impl ManifestBuilder {
    pub fn start<T: Serialize>(command: &'static str, config: &T, seed: u64) -> Result<Self> {
        Ok(Self {
            command,
            config: serde_json::to_value(config)?,
            seed,
            started: unix_now(),
        })
    }

    pub fn finish(self, inputs: &[PathBuf], outputs: &[PathBuf], path: &Path) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config: self.config,
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: digests(inputs)?,
            outputs: digests(outputs)?,
            started_unix: self.started,
            finished_unix: unix_now(),
        };
        fs::write(path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}

/// Applies a JSON config file beneath explicitly given flags.
///
/// The file may be a bare config object or a [`RunManifest`], whose
/// `config` is used. Keys are the long flag names with `-` or `_`.
pub fn resolve<T: Serialize + DeserializeOwned>(args: T, matches: &ArgMatches, config: Option<&Path>) -> Result<T> {
    let Some(path) = config else {
        return Ok(args);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut file: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if file.get("command").is_some() && file.get("config").is_some() {
        file = file["config"].take();
    }
    let Value::Object(overlay) = file else {
        anyhow::bail!("config {} must be a JSON object", path.display());
    };
    let mut base = serde_json::to_value(&args)?;
    let fields = base.as_object_mut().expect("command arguments serialize to an object");
    for (key, value) in overlay {
        let id = key.replace('-', "_");
        if !fields.contains_key(&id) {
            anyhow::bail!("config {}: unknown key {key:?}", path.display());
        }
        let explicit = matches
            .try_get_raw(&id)
            .ok()
            .flatten()
            .is_some()
            && matches!(
                matches.value_source(&id),
                Some(ValueSource::CommandLine) | Some(ValueSource::EnvVariable)
            );
        if !explicit {
            fields.insert(id, value);
        }
    }
    serde_json::from_value(base).with_context(|| format!("config {} has a value of the wrong type", path.display()))
}
