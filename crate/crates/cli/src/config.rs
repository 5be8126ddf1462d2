use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use rankchoice::estimation::TrainConfig;
use rankchoice::synthetic::DistrictSpec;
use rankchoice::FamilyKind;
use serde::{Deserialize, Serialize};

/// Contents of a `--config` file. Every section is optional; flags given
/// on the command line take precedence over values read here.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    /// Overrides on top of the tuned defaults of the chosen family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<toml::Table>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub district: Option<DistrictSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridFile>,
}

#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub l2: Option<Vec<f64>>,
    pub rank: Option<Vec<usize>>,
    pub strata: Option<Vec<usize>>,
    pub laplacian: Option<Vec<f64>>,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn load(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
}

/// Tuned defaults for `kind` with the `[train]` table laid over them.
pub fn train_config(file: &ConfigFile, kind: FamilyKind) -> Result<TrainConfig> {
    let base = TrainConfig::tuned(kind);
    let Some(overrides) = &file.train else {
        return Ok(base);
    };
    let mut table = toml::Table::try_from(&base).expect("train config serializes");
    for (k, v) in overrides {
        table.insert(k.clone(), v.clone());
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| ConfigError(format!("[train]: {e}")).into())
}

pub fn render(file: &ConfigFile) -> String {
    toml::to_string(file).expect("config serializes")
}
