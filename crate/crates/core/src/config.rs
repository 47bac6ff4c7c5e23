//! TOML run configuration for the command-line tool.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, DEFAULT_REDUCTION};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, StageSpec};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// One training run per seed; each seed drives initialization,
    /// shuffling and augmentation.
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
}

/// Architecture settings; class count and input shape come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub attention: String,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    pub reduction: usize,
    pub bottleneck_bias: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Cifar10,
    Cifar100,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DataKind,
    /// Binary record files, concatenated in order (CIFAR kinds).
    pub train_files: Vec<PathBuf>,
    /// Image side of the record files.
    pub side: usize,
    /// Use only the first `limit` records before splitting (0 = all).
    pub limit: usize,
    pub n_val: usize,
    pub split_seed: u64,
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            data: DataSection::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::mini_resnet(AttentionMode::None, 10);
        ModelSection {
            attention: "none".into(),
            stem_channels: m.stem_channels,
            stages: m.stages,
            reduction: DEFAULT_REDUCTION,
            bottleneck_bias: false,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            kind: DataKind::Cifar10,
            train_files: Vec::new(),
            side: 32,
            limit: 0,
            n_val: 1000,
            split_seed: 0,
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, num_classes: usize, input_shape: [usize; 3]) -> Result<ModelConfig> {
        let attention: AttentionMode = self.attention.parse()?;
        let cfg = ModelConfig {
            stem_channels: self.stem_channels,
            stages: self.stages.clone(),
            attention,
            num_classes,
            input_shape,
            reduction: self.reduction,
            bottleneck_bias: self.bottleneck_bias,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides (dotted keys address
    /// sections; `attention` is short for `model.attention`) and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        self.model.attention.parse::<AttentionMode>()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn apply_override(doc: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{item}' is not key=value")))?;
    let key = key.trim();
    let key = if key == "attention" { "model.attention" } else { key };
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut table = doc;
    for p in path {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// A TOML literal if the text parses as one, otherwise a plain string.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}
