use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{AdaptationConfig, ScaleWeights};
use crate::error::{validation_err, Error, Result};
use crate::grl::GrlConfig;
use crate::model::{DecodeParams, LossWeights, ModelConfig};

/// How the three image-level classifiers are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageAlignment {
    /// Per-scale weights from `scale_weights` (regressive by default).
    Ria,
    /// Equal weights with the same total as `scale_weights`.
    Eia,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub adaptation: AdaptationConfig,
    pub loss: LossWeights,
    /// Weight of the summed adaptation terms in the total objective. The
    /// image-level term sums over every feature-map location, so useful values
    /// are small.
    pub lambda_da: f64,
    pub scale_weights: ScaleWeights,
    pub image_alignment: ImageAlignment,
    pub msia: bool,
    /// Instances of the source image come from its ground-truth boxes instead of detections.
    pub msia_source_gt: bool,
    pub mlcr: bool,
    pub grl: GrlConfig,
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Cap on the L2 norm of the gradient of each parameter section (detector,
    /// adaptation heads), applied separately; 0 disables.
    pub max_grad_norm: f64,
    /// Optimizer steps.
    pub steps: usize,
    /// Source/target pairs averaged into each optimizer step.
    pub accumulation: usize,
    pub seed: u64,
    pub image_size: usize,
    /// Validation mAP every this many steps; 0 disables.
    pub eval_interval: usize,
    /// Random horizontal flips of training images.
    pub hflip: bool,
    /// Objectness threshold for detections that feed instance alignment.
    pub instance_conf: f64,
    /// At most this many instances per image and scale.
    pub instance_top_k: usize,
    pub nms_iou: f64,
    /// Thresholds used for validation mAP.
    pub eval_conf: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            adaptation: AdaptationConfig::default(),
            loss: LossWeights::default(),
            lambda_da: 0.005,
            scale_weights: ScaleWeights::default(),
            image_alignment: ImageAlignment::Ria,
            msia: true,
            msia_source_gt: false,
            mlcr: true,
            grl: GrlConfig::default(),
            lr_backbone: 0.001,
            lr_rest: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            max_grad_norm: 0.0,
            steps: 1000,
            accumulation: 1,
            seed: 0,
            image_size: 128,
            eval_interval: 0,
            hflip: false,
            instance_conf: 0.5,
            instance_top_k: 8,
            nms_iou: 0.45,
            eval_conf: 0.01,
        }
    }
}

impl TrainConfig {
    /// Plain detector training: every adaptation term disabled.
    pub fn source_only(mut self) -> Self {
        self.image_alignment = ImageAlignment::Off;
        self.msia = false;
        self.mlcr = false;
        self
    }

    /// Equal image-level alignment only.
    pub fn eia_only(mut self) -> Self {
        self.image_alignment = ImageAlignment::Eia;
        self.msia = false;
        self.mlcr = false;
        self
    }

    /// Regressive image alignment, instance alignment and consensus.
    pub fn full(mut self) -> Self {
        self.image_alignment = ImageAlignment::Ria;
        self.msia = true;
        self.mlcr = true;
        self
    }

    /// True when any adaptation term is computed (the target image is used).
    pub fn adapts(&self) -> bool {
        self.image_alignment != ImageAlignment::Off || self.msia || self.mlcr
    }

    /// Image-level maps are needed for alignment or for the consensus term.
    pub fn needs_image_maps(&self) -> bool {
        self.image_alignment != ImageAlignment::Off || self.mlcr
    }

    pub fn needs_instances(&self) -> bool {
        self.msia || self.mlcr
    }

    /// Per-scale weights of the image-level term.
    pub fn image_weights(&self) -> ScaleWeights {
        match self.image_alignment {
            ImageAlignment::Eia => ScaleWeights([self.scale_weights.sum() / 3.0; 3]),
            _ => self.scale_weights,
        }
    }

    pub fn decode_params(&self) -> DecodeParams {
        DecodeParams {
            conf_threshold: self.eval_conf,
            nms_iou: self.nms_iou,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adaptation.validate()?;
        self.grl.validate()?;
        let nonneg = [
            ("lambda_da", self.lambda_da),
            ("lr_backbone", self.lr_backbone),
            ("lr_rest", self.lr_rest),
            ("weight_decay", self.weight_decay),
            ("max_grad_norm", self.max_grad_norm),
            ("lambda_coord", self.loss.lambda_coord),
            ("lambda_noobj", self.loss.lambda_noobj),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(validation_err!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(validation_err!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if self
            .scale_weights
            .0
            .iter()
            .any(|&w| !(w >= 0.0 && w.is_finite()))
        {
            return Err(validation_err!("scale weights must be finite and >= 0"));
        }
        if self.accumulation == 0 {
            return Err(validation_err!("accumulation must be at least 1"));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(validation_err!(
                "image_size {} is not a positive multiple of 32",
                self.image_size
            ));
        }
        if !(self.instance_conf > 0.0 && self.instance_conf < 1.0) {
            return Err(validation_err!("instance_conf must lie in (0, 1)"));
        }
        self.decode_params().validate()
    }

    /// Parse TOML or JSON, chosen by extension (`.json` is JSON, anything else TOML).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| validation_err!("{}: {e}", path.display()))?
        } else {
            toml::from_str(&text).map_err(|e| validation_err!("{}: {e}", path.display()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let doc = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(doc.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
