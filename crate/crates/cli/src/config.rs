use std::path::Path;

use anyhow::{bail, Context, Result};
use crd_core::corpus::TrainSpec;
use crd_core::curation::CurationOptions;
use crd_core::evaluation::Scorer;
use crd_core::lab::{AttackConfig, ExperimentConfig};
use crd_core::tinyformer::{GenSettings, ModelConfig};
use crd_core::translation::DEFAULT_ANCHORS;
use serde::{Deserialize, Serialize};

/// Built-in synthetic training data for `train` when no corpus file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of generated lookup examples.
    pub size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { size: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct EvaluateConfig {
    pub scorer: Scorer,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranslateConfig {
    /// Subspace rank; defaults to a quarter of the smaller hidden size.
    pub rank: Option<usize>,
    /// Anchor prompts for the relative paradigm.
    pub anchors: usize,
    pub seed: u64,
}

impl Default for TranslateConfig {
    fn default() -> Self {
        Self {
            rank: None,
            anchors: DEFAULT_ANCHORS,
            seed: 0,
        }
    }
}

/// Everything a run can be configured with. Unknown keys anywhere are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainSpec,
    pub data: DataConfig,
    pub curate: CurationOptions,
    pub generation: GenSettings,
    pub evaluate: EvaluateConfig,
    pub translate: TranslateConfig,
    pub attack: AttackConfig,
    pub lab: ExperimentConfig,
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("override `{assignment}` is not of the form key=value");
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty segment");
    }
    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut node = table;
    for p in parents {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override `{key}`: `{p}` is not a table"))?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl Config {
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: Config = toml::Value::Table(table).try_into().context("invalid configuration")?;
        if let Some(seed) = seed {
            config.set_seed(seed);
        }
        Ok(config)
    }

    /// Routes one seed into every seeded component.
    fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.curate.seed = seed;
        self.translate.seed = seed;
        self.attack.seed = seed;
        self.lab.seed = seed;
        self.lab.model.seed = seed;
        self.lab.train.seed = seed;
        if let crd_core::tinyformer::DecodeMode::Temperature { seed: s, .. } = &mut self.generation.mode {
            *s = seed;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let c = Config::load(
            None,
            &["model.d_model=32".into(), "curate.dtype=\"q8\"".into(), "evaluate.scorer=token_f1".into()],
            Some(5),
        )
        .unwrap();
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.curate.dtype, crd_core::DType::Q8);
        assert_eq!(c.evaluate.scorer, Scorer::TokenF1);
        assert_eq!(c.train.seed, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::load(None, &["model.d_modle=32".into()], None).is_err());
        assert!(Config::load(None, &["bogus=1".into()], None).is_err());
        assert!(Config::load(None, &["nokey".into()], None).is_err());
    }
}
