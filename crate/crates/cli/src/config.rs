//! Run configuration: a JSON file with optional sections, overridden by
//! command-line flags.

use std::fs;
use std::path::Path;

use roisep_core::cruse::CruseConfig;
use roisep_core::eval::HeatmapConfig;
use roisep_core::train::TrainConfig;
use roisep_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Model presets selectable with `--model`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ModelPreset {
    Light,
    Heavy,
    Toy,
}

impl ModelPreset {
    pub fn config(self) -> CruseConfig {
        match self {
            ModelPreset::Light => CruseConfig::light(),
            ModelPreset::Heavy => CruseConfig::heavy(),
            ModelPreset::Toy => CruseConfig::toy(),
        }
    }
}

/// Contents of a `--config` file. Every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<CruseConfig>,
    pub train: Option<TrainConfig>,
    pub heatmap: Option<HeatmapConfig>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Model configuration: `--model` wins over the file, light by default.
    pub fn model(&self, preset: Option<ModelPreset>) -> Result<CruseConfig> {
        let config = match (preset, &self.model) {
            (Some(p), _) => p.config(),
            (None, Some(c)) => c.clone(),
            (None, None) => CruseConfig::light(),
        };
        config.validate().map_err(|e| prefix("model", e))?;
        Ok(config)
    }

    /// Master seed: `--seed` wins over the file, 0 by default.
    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(0)
    }
}

/// Adds a section name to a config error so it reads as a field path.
pub fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) if msg.starts_with(&format!("{section}.")) => Error::Config(msg),
        Error::Config(msg) => Error::Config(format!("{section}.{msg}")),
        other => Error::Config(format!("{section}: {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_precedence() {
        let c = RunConfig::default();
        assert_eq!(c.model(None).unwrap(), CruseConfig::light());
        assert_eq!(c.model(Some(ModelPreset::Toy)).unwrap(), CruseConfig::toy());
        assert_eq!(c.seed(None), 0);
        let c = RunConfig {
            model: Some(CruseConfig::heavy()),
            seed: Some(9),
            ..Default::default()
        };
        assert_eq!(c.model(None).unwrap(), CruseConfig::heavy());
        assert_eq!(c.seed(None), 9);
        assert_eq!(c.seed(Some(3)), 3);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"trian": {}}"#).unwrap();
        let err = RunConfig::load(Some(&path)).unwrap_err();
        assert!(err.to_string().contains("trian"), "{err}");
    }

    #[test]
    fn prefix_builds_field_paths() {
        let e = prefix("model", Error::Config("enc_filters: must be positive".into()));
        assert_eq!(e.to_string(), "config: model.enc_filters: must be positive");
        let e = prefix("train", Error::Config("train.lr: negative".into()));
        assert_eq!(e.to_string(), "config: train.lr: negative");
    }
}
