//! Run configuration: a TOML document with `[data]`, `[model]` and `[train]`
//! tables, plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use darer_core::synth::SynthConfig;
use darer_core::{DarerConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

fn one() -> usize {
    1
}
fn tenth() -> f64 {
    0.1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// tokens seen fewer times in training map to UNK
    #[serde(default = "one")]
    pub min_count: usize,
    /// generate the corpus instead of reading files
    pub synthetic: Option<SynthConfig>,
    /// split fractions for a generated corpus
    #[serde(default = "tenth")]
    pub valid_frac: f64,
    #[serde(default = "tenth")]
    pub test_frac: f64,
}

const DATA_KEYS: &[&str] = &[
    "train",
    "valid",
    "test",
    "min_count",
    "synthetic",
    "valid_frac",
    "test_frac",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: DarerConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn section_keys(section: &str) -> Vec<String> {
    let keys = |v: toml::Value| match v {
        toml::Value::Table(t) => t.keys().cloned().collect(),
        _ => Vec::new(),
    };
    match section {
        "data" => DATA_KEYS.iter().map(|s| s.to_string()).collect(),
        "model" => keys(toml::Value::try_from(DarerConfig::default()).expect("config serializes")),
        "train" => keys(toml::Value::try_from(TrainConfig::default()).expect("config serializes")),
        _ => Vec::new(),
    }
}

/// Expands a bare key such as `T` to its full path (`model.T`) when exactly
/// one section has it.
fn resolve_key(key: &str) -> Result<Vec<String>, CliError> {
    if key.contains('.') {
        return Ok(key.split('.').map(str::to_string).collect());
    }
    let owners: Vec<&str> = ["data", "model", "train"]
        .into_iter()
        .filter(|s| section_keys(s).iter().any(|k| k == key))
        .collect();
    match owners.as_slice() {
        [one] => Ok(vec![one.to_string(), key.to_string()]),
        [] => Err(CliError::Usage(format!("unknown config key {key:?}"))),
        many => Err(CliError::Usage(format!(
            "config key {key:?} is ambiguous; qualify it as one of {}",
            many.iter()
                .map(|s| format!("{s}.{key}"))
                .collect::<Vec<_>>()
                .join(", ")
        ))),
    }
}

/// Applies `key=value` overrides to a parsed document.
pub fn apply_overrides(doc: &mut toml::Table, overrides: &[String]) -> Result<(), CliError> {
    for item in overrides {
        let (key, raw) = item.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("override {item:?} is not of the form key=value"))
        })?;
        let path = resolve_key(key.trim())?;
        let mut table = &mut *doc;
        for part in &path[..path.len() - 1] {
            let entry = table
                .entry(part.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| CliError::Usage(format!("{part} in {key} is not a table")))?;
        }
        table.insert(path[path.len() - 1].clone(), parse_value(raw.trim()));
    }
    Ok(())
}

impl RunConfig {
    /// Parses `text`, applies overrides, validates, and resolves data paths
    /// against `base_dir`.
    pub fn from_toml(text: &str, overrides: &[String], base_dir: &Path) -> Result<Self, CliError> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        apply_overrides(&mut doc, overrides)?;
        let mut cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e| CliError::Usage(format!("config: {e}")))?;
        for p in [&mut cfg.data.train, &mut cfg.data.valid, &mut cfg.data.test]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, overrides, base)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.min_count == 0 {
            return Err(CliError::Usage("data.min_count must be at least 1".into()));
        }
        match (&self.data.synthetic, &self.data.train, &self.data.valid) {
            (Some(s), None, None) => {
                s.validate()?;
                let (v, t) = (self.data.valid_frac, self.data.test_frac);
                if !(v > 0.0 && t >= 0.0 && v + t < 1.0) {
                    return Err(CliError::Usage(format!(
                        "bad split fractions valid={v} test={t}"
                    )));
                }
            }
            (None, Some(_), Some(_)) => {}
            (Some(_), _, _) => {
                return Err(CliError::Usage(
                    "data.synthetic cannot be combined with data.train/data.valid".into(),
                ))
            }
            _ => {
                return Err(CliError::Usage(
                    "data needs either train and valid paths or a synthetic table".into(),
                ))
            }
        }
        Ok(())
    }
}
