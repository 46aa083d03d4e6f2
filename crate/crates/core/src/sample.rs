use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{shape_err, validation_err, Result};
use crate::tensor::Tensor;

/// Domain of an image: source (labeled) is 0, target (unlabeled) is 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainLabel {
    Source,
    Target,
}

impl DomainLabel {
    pub fn value(self) -> u8 {
        match self {
            DomainLabel::Source => 0,
            DomainLabel::Target => 1,
        }
    }

    pub fn as_f32(self) -> f32 {
        self.value() as f32
    }

    pub fn from_value(v: u8) -> Result<Self> {
        match v {
            0 => Ok(DomainLabel::Source),
            1 => Ok(DomainLabel::Target),
            _ => Err(validation_err!("domain label must be 0 or 1, got {v}")),
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            DomainLabel::Source => DomainLabel::Target,
            DomainLabel::Target => DomainLabel::Source,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DomainLabel::Source => "source",
            DomainLabel::Target => "target",
        }
    }
}

/// One labeled object, normalized center-size coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    #[serde(rename = "class")]
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxAnnotation {
    pub fn new(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            class_id,
            cx,
            cy,
            w,
            h,
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(self.cx, self.cy, self.w, self.h)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.class_id >= num_classes {
            return Err(validation_err!(
                "class id {} out of range for {num_classes} classes",
                self.class_id
            ));
        }
        let finite = [self.cx, self.cy, self.w, self.h]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(self.w > 0.0) || !(self.h > 0.0) {
            return Err(validation_err!(
                "box ({}, {}, {}, {}) needs finite coordinates and positive size",
                self.cx,
                self.cy,
                self.w,
                self.h
            ));
        }
        Ok(())
    }

    /// Same annotation with corners clamped into the unit square.
    pub fn clamped(&self) -> Self {
        let b = self.bbox().clamp_unit();
        Self {
            class_id: self.class_id,
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
        }
    }
}

/// An image with its domain and, for the source domain, its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub domain: DomainLabel,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub annotations: Vec<BoxAnnotation>,
}

impl ImageSample {
    pub fn new(
        id: impl Into<String>,
        domain: DomainLabel,
        pixels: Tensor,
        annotations: Vec<BoxAnnotation>,
    ) -> Result<Self> {
        let (c, h, w) = pixels.dims3()?;
        if c != 3 {
            return Err(shape_err!("image needs 3 channels, got {c}"));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(shape_err!(
                "image size {h}x{w} is not a positive multiple of 32"
            ));
        }
        Ok(Self {
            id: id.into(),
            domain,
            pixels,
            annotations,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}
