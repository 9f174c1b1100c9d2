//! Coil telemetry records, CSV/JSONL ingestion, z-score preprocessing,
//! fixed-length windowing and coil-level split bookkeeping.

mod io;
mod preprocess;
mod split;

pub use io::{load_sequences, resolve_data_path, save_sequences, Format};
pub use preprocess::{window_sequences, Normalizer, WindowReport};
pub use split::{leave_coils_out_folds, stratified_split, CoilSplit, Fold};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Feature order used everywhere: noise level, SNR, body/local signal ratio,
/// SNR at isocenter.
pub const FEATURES: [&str; 4] = ["cnl", "csp", "ssr", "csi"];
pub const WINDOW_LENGTH: usize = 40;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {detail}")]
    Schema { line: u64, detail: String },
    #[error("line {line}: unknown label '{token}' (expected normal or broken)")]
    UnknownLabel { line: u64, token: String },
    #[error("line {line}: non-finite value in '{field}'")]
    NonFinite { line: u64, field: &'static str },
    #[error("coil {coil} carries both labels")]
    ConflictingLabel { coil: String },
    #[error("feature '{feature}' has zero variance on the training coils")]
    ZeroVariance { feature: &'static str },
    #[error("normalizer fit would see test coil {coil}")]
    Leakage { coil: String },
    #[error("window from coil {coil} is already normalized")]
    AlreadyNormalized { coil: String },
    #[error("no {0} coils in the input")]
    MissingClass(Label),
    #[error("{broken} broken coils cannot cover {k} folds")]
    TooFewBroken { broken: usize, k: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Broken,
}

impl Label {
    /// Class index: normal 0, broken 1.
    pub fn index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Broken => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            Label::Broken
        } else {
            Label::Normal
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Broken => "broken",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "normal" => Ok(Label::Normal),
            "broken" => Ok(Label::Broken),
            other => Err(other.to_string()),
        }
    }
}

/// One measurement instant. `timestamp` is in epoch seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureRecord {
    pub timestamp: i64,
    pub values: [f64; 4],
}

/// All records of one coil, time-ordered.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilSequence {
    pub coil_id: String,
    pub label: Label,
    pub records: Vec<FeatureRecord>,
}

/// A fixed-length slice of one coil, stored feature-major
/// (`data[f * length + t]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub coil_id: String,
    pub label: Label,
    pub length: usize,
    pub data: Vec<f64>,
    pub normalized: bool,
    pub synthetic: bool,
}

impl Window {
    pub fn value(&self, feature: usize, t: usize) -> f64 {
        self.data[feature * self.length + t]
    }
}

/// `(coil_id, label)` pairs, one per coil, in input order.
pub fn coil_labels(sequences: &[CoilSequence]) -> Vec<(String, Label)> {
    sequences.iter().map(|s| (s.coil_id.clone(), s.label)).collect()
}
