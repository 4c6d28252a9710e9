//! Run configuration shared by the command-line tools.
//!
//! A JSON document with one section per module. Every field has a default,
//! so `{}` is a valid configuration; unknown keys are rejected at every
//! level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::dataset::SyntheticSpec;
use crate::error::{Error, Result};
use crate::mdm::MdmConfig;
use crate::model::ProtoLayerConfig;
use crate::saliency_eval::EvalSettings;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Share of pixels kept when binarizing a CAM.
    pub top_percent: f64,
    /// Deletion/insertion step; must divide 100.
    pub step_percent: f64,
    pub occlusion_patch: usize,
    pub occlusion_stride: usize,
    /// Evaluate at most this many test images (all when absent).
    pub max_images: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            top_percent: 20.0,
            step_percent: 2.0,
            occlusion_patch: 8,
            occlusion_stride: 4,
            max_images: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_percent > 0.0 && self.top_percent <= 100.0) {
            return Err(Error::InvalidConfig(format!("eval.top_percent must be in (0, 100], got {}", self.top_percent)));
        }
        let steps = 100.0 / self.step_percent;
        if !(self.step_percent > 0.0) || (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("eval.step_percent must divide 100, got {}", self.step_percent)));
        }
        if self.occlusion_patch == 0 || self.occlusion_stride == 0 {
            return Err(Error::InvalidConfig("eval occlusion patch and stride must be positive".into()));
        }
        Ok(())
    }

    pub fn settings(&self) -> EvalSettings {
        EvalSettings {
            top_percent: self.top_percent,
            step_percent: self.step_percent,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub protolayer: ProtoLayerConfig,
    pub trainer: TrainConfig,
    pub mdm: MdmConfig,
    pub eval: EvalConfig,
    pub dataset: SyntheticSpec,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.protolayer.validate()?;
        self.trainer.validate()?;
        self.mdm.validate()?;
        self.eval.validate()?;
        self.dataset.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"trainer": {"lamda1": 0.5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"mdm": {"gamma": 2.0, "colour": 1}}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::from_json(r#"{"trainer": {"epochs": 3}, "eval": {"top_percent": 50}}"#).unwrap();
        assert_eq!(cfg.trainer.epochs, 3);
        assert_eq!(cfg.trainer.lambda1, 0.8);
        assert_eq!(cfg.eval.top_percent, 50.0);
        assert_eq!(cfg.mdm.steps, 800);
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(RunConfig::from_json(r#"{"eval": {"step_percent": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"protolayer": {"feature_masks": 0}}"#).is_err());
    }
}
