use serde::{Deserialize, Serialize};

use crate::error::{validation_err, Result};

/// Output strides of the three detection scales, finest first.
pub const STRIDES: [usize; 3] = [8, 16, 32];
pub const NUM_SCALES: usize = 3;

/// Per-scale anchor shapes in normalized image units, finest scale first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchors {
    pub per_scale: [Vec<(f64, f64)>; NUM_SCALES],
}

impl Default for Anchors {
    fn default() -> Self {
        let base = [(0.06, 0.06), (0.12, 0.10), (0.10, 0.14)];
        let scaled = |f: f64| base.iter().map(|&(w, h)| (w * f, h * f)).collect();
        Self {
            per_scale: [scaled(1.0), scaled(2.0), scaled(4.0)],
        }
    }
}

impl Anchors {
    pub fn per_scale_count(&self) -> usize {
        self.per_scale[0].len()
    }

    pub fn get(&self, scale: usize, anchor: usize) -> (f64, f64) {
        self.per_scale[scale][anchor]
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.per_scale_count();
        if a == 0 {
            return Err(validation_err!("every scale needs at least one anchor"));
        }
        for (k, set) in self.per_scale.iter().enumerate() {
            if set.len() != a {
                return Err(validation_err!(
                    "scale {k} has {} anchors, expected {a}",
                    set.len()
                ));
            }
            if let Some(&(w, h)) = set.iter().find(|&&(w, h)| !(w > 0.0 && h > 0.0)) {
                return Err(validation_err!(
                    "anchor ({w}, {h}) at scale {k} is not positive"
                ));
            }
        }
        let mean_area = |set: &Vec<(f64, f64)>| set.iter().map(|&(w, h)| w * h).sum::<f64>();
        for k in 1..NUM_SCALES {
            if mean_area(&self.per_scale[k]) <= mean_area(&self.per_scale[k - 1]) {
                return Err(validation_err!(
                    "anchors at scale {k} must be larger than those at scale {}",
                    k - 1
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of object classes `M`.
    pub num_classes: usize,
    /// Output channels of the five stride-2 backbone blocks.
    pub backbone_widths: [usize; 5],
    /// Stride-1 3x3 convolutions appended to each block after the downsampling conv.
    pub extra_convs_per_block: usize,
    /// Width of the 3x3 conv inside every detection head; 0 means a bare 1x1 output layer.
    pub head_hidden: usize,
    pub leaky_slope: f32,
    pub anchors: Anchors,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            backbone_widths: [16, 32, 64, 128, 256],
            extra_convs_per_block: 0,
            head_hidden: 0,
            leaky_slope: 0.1,
            anchors: Anchors::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(validation_err!("num_classes must be at least 1"));
        }
        if self.backbone_widths.contains(&0) {
            return Err(validation_err!("backbone widths must be positive"));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(validation_err!("leaky slope must lie in [0, 1)"));
        }
        self.anchors.validate()
    }

    /// Channel count of the feature map tapped at `scale`.
    pub fn tap_channels(&self, scale: usize) -> usize {
        self.backbone_widths[2 + scale]
    }

    pub fn anchors_per_scale(&self) -> usize {
        self.anchors.per_scale_count()
    }

    /// `5 + M`: tx, ty, tw, th, objectness, then one score per class.
    pub fn anchor_stride(&self) -> usize {
        5 + self.num_classes
    }

    pub fn head_channels(&self) -> usize {
        self.anchors_per_scale() * self.anchor_stride()
    }
}
