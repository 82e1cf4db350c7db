//! Run configuration: one JSON document, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::DetectionConfig;
use crate::error::{Error, Result};
use crate::image_encoder::{GridMaskConfig, ImageEncoderConfig};
use crate::losses::LossConfig;
use crate::occnet::OccNetConfig;
use crate::synth::SceneSpec;
use crate::tensor::optim::AdamWConfig;

pub const SEED_ENV: &str = "OCCU_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of lifted feature scales; the decoder emits one more.
    pub scales: usize,
    pub image: ImageEncoderConfig,
    pub occ: OccNetConfig,
    pub det: DetectionConfig,
    /// Learned blend of local and BEV features; plain average when off.
    pub fusion_gate: bool,
    /// Auxiliary detection branch during training.
    pub aux: bool,
    pub grid_mask: GridMaskConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scales: 3,
            image: ImageEncoderConfig::default(),
            occ: OccNetConfig::default(),
            det: DetectionConfig::default(),
            fusion_gate: true,
            aux: true,
            grid_mask: GridMaskConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Apply grid-mask augmentation to training images.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 300, augment: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneSpec,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: AdamWConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Replaces the seed with `OCCU_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Contract(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.det.validate()?;
        let m = &self.model;
        if m.scales != 3 {
            return Err(Error::Contract(format!("scales = {} unsupported; the network lifts exactly 3", m.scales)));
        }
        if m.image.feature_channels == 0 || m.occ.logit_channels == 0 || m.occ.encoder_channels.contains(&0) {
            return Err(Error::Contract("channel widths must be positive".into()));
        }
        let [w, h] = self.scene.image_size;
        if w % 32 != 0 || h % 32 != 0 {
            return Err(Error::Contract(format!("image size {w}x{h} must be divisible by 32")));
        }
        let f = 1 << (m.occ.encoder_channels.len() - 1);
        if self.scene.grid.resolution.iter().any(|&d| d % f != 0) {
            return Err(Error::Contract(format!(
                "grid {:?} must be divisible by {f}",
                self.scene.grid.resolution
            )));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::Contract(format!("optimizer settings {o:?}")));
        }
        if !(self.loss.lambda >= 0.0) {
            return Err(Error::Contract(format!("lambda {}", self.loss.lambda)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_structural_constants() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!((c.model.scales, c.loss.lambda, c.model.det.layers), (3, 2.0, 6));
        assert_eq!((c.optim.lr, c.optim.weight_decay), (2e-4, 0.01));
        assert_eq!(c.model.det.queries, 100);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"model": {"aux_branch": false}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"seeed": 1}"#).is_err());
        let c = RunConfig::from_json(r#"{"model": {"aux": false, "det": {"bev": false}}}"#).unwrap();
        assert!(!c.model.aux && !c.model.det.bev && c.model.det.visual);
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn bad_shapes_rejected() {
        let mut c = RunConfig::default();
        c.scene.image_size = [100, 128];
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.scene.grid.resolution = [40, 40, 6];
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.model.scales = 2;
        assert!(c.validate().is_err());
    }
}
