//! Turning raw head grids into scored boxes.

use serde::{Deserialize, Serialize};

use super::config::{Anchors, NUM_SCALES};
use crate::bbox::BBox;
use crate::error::{shape_err, validation_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scale: usize,
    pub bbox: BBox,
    pub objectness: f64,
    pub class_scores: Vec<f64>,
    /// `(u, v)`: column and row of the grid cell that produced the box.
    pub cell: (usize, usize),
    pub anchor: usize,
}

impl Detection {
    /// Highest-scoring class; the lowest index wins ties.
    pub fn class_id(&self) -> usize {
        let mut best = 0;
        for (c, &s) in self.class_scores.iter().enumerate() {
            if s > self.class_scores[best] {
                best = c;
            }
        }
        best
    }

    /// Ranking score: objectness times the best class score.
    pub fn score(&self) -> f64 {
        self.objectness
            * self
                .class_scores
                .get(self.class_id())
                .copied()
                .unwrap_or(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

impl DecodeParams {
    pub fn new(conf_threshold: f64, nms_iou: f64) -> Result<Self> {
        let p = Self {
            conf_threshold,
            nms_iou,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("conf_threshold", self.conf_threshold),
            ("nms_iou", self.nms_iou),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(validation_err!("{name} must lie in (0, 1), got {v}"));
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Every cell/anchor of one image at one scale whose objectness clears the threshold.
fn decode_scale(
    grid: &Tensor,
    image: usize,
    scale: usize,
    anchors: &Anchors,
    conf_threshold: f64,
    out: &mut Vec<Detection>,
) -> Result<()> {
    let (_, ch, gh, gw) = grid.dims4()?;
    let a_count = anchors.per_scale_count();
    if ch % a_count != 0 || ch / a_count < 6 {
        return Err(shape_err!(
            "grid with {ch} channels does not fit {a_count} anchors"
        ));
    }
    let stride = ch / a_count;
    let m = stride - 5;
    let plane = gh * gw;
    let data = &grid.data()[image * ch * plane..(image + 1) * ch * plane];
    let at = |c: usize, v: usize, u: usize| data[c * plane + v * gw + u] as f64;
    for a in 0..a_count {
        let base = a * stride;
        let (aw, ah) = anchors.get(scale, a);
        for v in 0..gh {
            for u in 0..gw {
                let objectness = sigmoid(at(base + 4, v, u));
                if !(objectness >= conf_threshold) {
                    continue;
                }
                let cx = (sigmoid(at(base, v, u)) + u as f64) / gw as f64;
                let cy = (sigmoid(at(base + 1, v, u)) + v as f64) / gh as f64;
                let w = aw * at(base + 2, v, u).exp();
                let h = ah * at(base + 3, v, u).exp();
                let bbox = BBox::new(cx, cy, w, h).clamp_unit();
                if !bbox.is_finite() || bbox.area() <= 0.0 {
                    continue;
                }
                let class_scores = (0..m).map(|c| sigmoid(at(base + 5 + c, v, u))).collect();
                out.push(Detection {
                    scale,
                    bbox,
                    objectness,
                    class_scores,
                    cell: (u, v),
                    anchor: a,
                });
            }
        }
    }
    Ok(())
}

/// Greedy per-class suppression: a box is dropped when its IoU with a
/// higher-scoring kept box of the same class exceeds `iou_threshold`.
/// The output is sorted by descending score.
pub fn nms(mut detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    // Stable sort keeps generation order (scale, anchor, row, column) among equal scores.
    detections.sort_by(|a, b| b.score().total_cmp(&a.score()));
    let mut kept: Vec<Detection> = Vec::new();
    for det in detections {
        let class = det.class_id();
        let suppressed = kept
            .iter()
            .any(|k| k.class_id() == class && k.bbox.iou(&det.bbox) > iou_threshold);
        if !suppressed {
            kept.push(det);
        }
    }
    kept
}

/// Decode the three grids (each `[B, A*(5+M), H_k, W_k]`) into per-image detections.
pub fn decode_detections(
    grids: &[&Tensor; NUM_SCALES],
    anchors: &Anchors,
    params: DecodeParams,
) -> Result<Vec<Vec<Detection>>> {
    params.validate()?;
    let batch = grids[0].dims4()?.0;
    for g in grids.iter() {
        if g.dims4()?.0 != batch {
            return Err(shape_err!("grids disagree on batch size"));
        }
    }
    let mut per_image = Vec::with_capacity(batch);
    for image in 0..batch {
        let mut raw = Vec::new();
        for (scale, grid) in grids.iter().enumerate() {
            decode_scale(grid, image, scale, anchors, params.conf_threshold, &mut raw)?;
        }
        per_image.push(nms(raw, params.nms_iou));
    }
    Ok(per_image)
}
