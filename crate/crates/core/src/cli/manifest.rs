use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;
use crate::harness::{CvConfig, TrainConfig};
use crate::models::ModelSpec;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub data: String,
    pub seed: u64,
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub window_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvCommandConfig {
    pub data: String,
    pub specs: Vec<ModelSpec>,
    pub train: TrainConfig,
    pub cv: CvConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCommandConfig {
    pub data: String,
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub cv: CvConfig,
    /// `None` is the arm without augmentation.
    pub targets: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateCommandConfig {
    pub checkpoint: String,
    pub data: String,
    pub coils: Option<Vec<String>>,
    pub batch_size: usize,
}

/// What a command was asked to do, what it produced, and the checksums of
/// the files it wrote. Output paths are not recorded, so a replay into
/// another directory yields the same bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub results: serde_json::Value,
    /// File name to sha256 of every other file written alongside.
    pub outputs: BTreeMap<String, String>,
}

impl ExperimentManifest {
    pub fn config_as<C: DeserializeOwned>(&self) -> Result<C, CliError> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| CliError::Usage(format!("manifest config for '{}': {e}", self.command)))
    }
}

pub fn to_json<S: Serialize>(value: &S) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads the `command` field and the rest of a manifest file.
pub fn read_manifest_value(path: &Path) -> Result<(String, serde_json::Value), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let command = value
        .get("command")
        .and_then(|c| c.as_str())
        .ok_or_else(|| CliError::Usage(format!("{}: no command field", path.display())))?
        .to_string();
    Ok((command, value))
}

/// Loads an experiment manifest and checks it belongs to `command`.
pub fn read_experiment(path: &Path, command: &str) -> Result<ExperimentManifest, CliError> {
    let (found, value) = read_manifest_value(path)?;
    if found != command {
        return Err(CliError::Usage(format!(
            "{} was written by '{found}', not '{command}'",
            path.display()
        )));
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}
