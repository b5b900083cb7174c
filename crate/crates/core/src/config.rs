//! The JSON run configuration consumed by `scalenet train`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::meta::ScaleEncoder;
use crate::model::Model;
use crate::network::BackboneConfig;
use crate::scalar::Scalar;
use crate::training::TrainingConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Intermediate checkpoint period in epochs; the final checkpoint is always written.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
            checkpoint_every: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut config: RunConfig = serde_json::from_str(text)?;
        config.training.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn encoder(&self, backbone_rate: usize) -> Result<ScaleEncoder> {
        let rate = self.training.downsample_rate.unwrap_or(backbone_rate as u32);
        ScaleEncoder::new(self.training.encoding_coefficient, rate)
    }

    /// Freshly initialized model for this configuration.
    pub fn build_model<T: Scalar>(&self) -> Result<Model<T>> {
        let backbone = self.backbone.build()?;
        let encoder = self.encoder(backbone.downsample_rate())?;
        let t = &self.training;
        Model::new(backbone, encoder, &t.resolutions, t.hidden_units, t.share_bn, t.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let config = RunConfig::default();
        let back = RunConfig::from_json(&config.to_json()).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::from_json(r#"{"trainer": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"training": {"resolutions": [32], "lr0": 0.1, "epochs": 1, "batch_size": 4, "lr": 1}}"#).is_err());
    }

    #[test]
    fn partial_config_uses_defaults() {
        let c = RunConfig::from_json(
            r#"{"training": {"resolutions": [16, 32], "lr0": 0.05, "epochs": 2, "batch_size": 8}}"#,
        )
        .unwrap();
        assert_eq!(c.training.resolutions, vec![32, 16]);
        assert_eq!(c.training.momentum, 0.9);
        assert!(c.training.distill);
        let model = c.build_model::<f32>().unwrap();
        assert_eq!(model.encoder.downsample_rate, 4);
    }

    #[test]
    fn invalid_training_values_fail() {
        assert!(RunConfig::from_json(
            r#"{"training": {"resolutions": [32, 32], "lr0": 0.1, "epochs": 1, "batch_size": 4}}"#
        )
        .is_err());
        assert!(RunConfig::from_json(
            r#"{"training": {"resolutions": [32], "alpha": -1, "lr0": 0.1, "epochs": 1, "batch_size": 4}}"#
        )
        .is_err());
    }
}
