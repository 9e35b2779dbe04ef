use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crd_format::file::CrdFile;
use crate::crd_format::payload::DType;
use crate::error::{CrdError, Result};
use crate::tinyformer::{Fingerprint, ModelConfig, PosEncoding};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorInfo {
    pub fingerprint: Fingerprint,
    pub pos_encoding: PosEncoding,
    pub config: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionInfo {
    pub retain_fraction: f64,
    pub scoring_rule: String,
}

/// A plaintext (prompt, answer) pair from the calibration split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSample {
    pub id: String,
    pub prompt: String,
    pub answer: String,
}

/// Human-readable sidecar describing a release. `created` is the only field
/// that varies between otherwise identical runs and is serialized first, on
/// its own line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Datacard {
    pub created: String,
    pub dataset: String,
    pub task: String,
    pub scoring_rule: String,
    pub dtype: DType,
    pub record_count: usize,
    pub anchor: AnchorInfo,
    pub compression: CompressionInfo,
    #[serde(default)]
    pub samples: Vec<CalibrationSample>,
}

impl Datacard {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CrdError::Format(format!("datacard: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CrdError::Format(format!("datacard: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Calibration samples must never be scored records.
    pub fn check_disjoint(&self, file: &CrdFile) -> Result<()> {
        let scored: HashSet<&str> = file.ids().collect();
        match self.samples.iter().find(|s| scored.contains(s.id.as_str())) {
            Some(s) => Err(CrdError::Validation(format!(
                "datacard sample `{}` is also a scored record",
                s.id
            ))),
            None => Ok(()),
        }
    }
}

/// `<dir>/<dataset>.datacard` next to a container at `<dir>/<dataset>.crd`.
pub fn datacard_path(crd_path: &Path) -> PathBuf {
    crd_path.with_extension("datacard")
}
