//! Sum-of-squares detection objective.
//!
//! Each ground-truth box is owned by exactly one predictor: the anchor (over
//! all scales) whose shape best overlaps the box, in the grid cell containing
//! the box center. That predictor is pulled toward the box; every other
//! predictor of an annotated image is pushed toward zero objectness.
//!
//! Per image the loss is
//!
//! ```text
//!   coord * sum_resp [(sig(tx) - x)^2 + (sig(ty) - y)^2]
//! + coord * sum_resp [(sqrt(w_pred) - sqrt(w))^2 + (sqrt(h_pred) - sqrt(h))^2]
//! +         sum_resp (sig(obj) - 1)^2
//! + noobj * sum_rest  sig(obj)^2
//! +         sum_resp sum_c (sig(cls_c) - [c == class])^2
//! ```
//!
//! where `x, y` are the center offsets inside the owning cell (in cell units)
//! and `w, h` are normalized image units. The batch loss is the mean over the
//! annotated images.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{Anchors, NUM_SCALES};
use super::detector::DetectionGrid;
use crate::autograd::{Graph, Var};
use crate::bbox::BBox;
use crate::error::{shape_err, Result};
use crate::sample::BoxAnnotation;
use crate::tensor::Tensor;

/// Size logits are clamped to this magnitude before `exp` in the loss.
pub const MAX_LOG_SCALE: f32 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
        }
    }
}

/// The predictor responsible for one ground-truth box, and its regression targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub image: usize,
    pub scale: usize,
    pub anchor: usize,
    /// `(u, v)`: column and row.
    pub cell: (usize, usize),
    /// Center offset inside the cell, in `[0, 1)`.
    pub offset: (f64, f64),
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
}

/// Order used to settle two boxes competing for the same predictor:
/// larger area wins, then the lexicographically smaller `(class, cx, cy, w, h)`.
fn preference(a: &BoxAnnotation, b: &BoxAnnotation) -> Ordering {
    let area = |x: &BoxAnnotation| x.w * x.h;
    area(b)
        .total_cmp(&area(a))
        .then(a.class_id.cmp(&b.class_id))
        .then(a.cx.total_cmp(&b.cx))
        .then(a.cy.total_cmp(&b.cy))
        .then(a.w.total_cmp(&b.w))
        .then(a.h.total_cmp(&b.h))
}

/// Best `(scale, anchor)` for a box shape; ties go to the finer scale / lower anchor.
pub fn best_anchor(anchors: &Anchors, w: f64, h: f64) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_iou = f64::NEG_INFINITY;
    for k in 0..NUM_SCALES {
        for (a, &(aw, ah)) in anchors.per_scale[k].iter().enumerate() {
            let iou = BBox::shape_iou(w, h, aw, ah);
            if iou > best_iou {
                best_iou = iou;
                best = (k, a);
            }
        }
    }
    best
}

/// Assign every annotation to its responsible predictor.
///
/// `annotations[i]` is `None` for images that carry no supervision (target
/// domain). `grid_sizes[k]` is `(H_k, W_k)`. The result does not depend on the
/// order of each annotation list.
pub fn assign_targets(
    annotations: &[Option<&[BoxAnnotation]>],
    grid_sizes: [(usize, usize); NUM_SCALES],
    anchors: &Anchors,
    num_classes: usize,
) -> Result<Vec<Target>> {
    let mut slots: BTreeMap<(usize, usize, usize, usize, usize), BoxAnnotation> = BTreeMap::new();
    for (image, anns) in annotations.iter().enumerate() {
        let Some(anns) = anns else { continue };
        for ann in anns.iter() {
            ann.validate(num_classes)?;
            let (scale, anchor) = best_anchor(anchors, ann.w, ann.h);
            let (gh, gw) = grid_sizes[scale];
            let u = ((ann.cx * gw as f64).floor().max(0.0) as usize).min(gw - 1);
            let v = ((ann.cy * gh as f64).floor().max(0.0) as usize).min(gh - 1);
            let key = (image, scale, anchor, v, u);
            match slots.get(&key) {
                Some(existing) if preference(existing, ann) != Ordering::Greater => {}
                _ => {
                    slots.insert(key, *ann);
                }
            }
        }
    }
    Ok(slots
        .into_iter()
        .map(|((image, scale, anchor, v, u), ann)| {
            let (gh, gw) = grid_sizes[scale];
            Target {
                image,
                scale,
                anchor,
                cell: (u, v),
                offset: (
                    (ann.cx * gw as f64 - u as f64).clamp(0.0, 1.0),
                    (ann.cy * gh as f64 - v as f64).clamp(0.0, 1.0),
                ),
                w: ann.w,
                h: ann.h,
                class_id: ann.class_id,
            }
        })
        .collect())
}

/// Values of the individual (weighted, batch-averaged) terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionLossParts {
    pub xy: f64,
    pub wh: f64,
    pub obj: f64,
    pub noobj: f64,
    pub class: f64,
}

impl DetectionLossParts {
    pub fn total(&self) -> f64 {
        self.xy + self.wh + self.obj + self.noobj + self.class
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss {
    pub total: Var,
    pub parts: DetectionLossParts,
}

struct GridIndex {
    anchors: usize,
    stride: usize,
    h: usize,
    w: usize,
}

impl GridIndex {
    fn at(&self, image: usize, anchor: usize, channel: usize, v: usize, u: usize) -> usize {
        (((image * self.anchors + anchor) * self.stride + channel) * self.h + v) * self.w + u
    }
}

/// Detection loss over the batch; images with `None` annotations are skipped entirely.
pub fn detection_loss(
    g: &mut Graph,
    grids: &[DetectionGrid; NUM_SCALES],
    annotations: &[Option<&[BoxAnnotation]>],
    anchors: &Anchors,
    num_classes: usize,
    weights: LossWeights,
) -> Result<DetectionLoss> {
    let a_count = anchors.per_scale_count();
    let stride = 5 + num_classes;
    let mut sizes = [(0, 0); NUM_SCALES];
    for (k, grid) in grids.iter().enumerate() {
        let (b, ch, h, w) = g.value(grid.var).dims4()?;
        if ch != a_count * stride {
            return Err(shape_err!(
                "grid at scale {k} has {ch} channels, expected {}",
                a_count * stride
            ));
        }
        if b != annotations.len() {
            return Err(shape_err!(
                "grid batch {b} does not match {} annotation lists",
                annotations.len()
            ));
        }
        sizes[k] = (h, w);
    }
    let targets = assign_targets(annotations, sizes, anchors, num_classes)?;
    let supervised: Vec<usize> = (0..annotations.len())
        .filter(|&i| annotations[i].is_some())
        .collect();
    if supervised.is_empty() {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok(DetectionLoss {
            total: zero,
            parts: DetectionLossParts::default(),
        });
    }
    let norm = 1.0 / supervised.len() as f32;
    let coord = weights.lambda_coord as f32 * norm;
    let noobj_w = weights.lambda_noobj as f32 * norm;

    let mut terms = Vec::new();
    let mut parts = DetectionLossParts::default();
    for (k, grid) in grids.iter().enumerate() {
        let (h, w) = sizes[k];
        let ix = GridIndex {
            anchors: a_count,
            stride,
            h,
            w,
        };
        let resp: Vec<&Target> = targets.iter().filter(|t| t.scale == k).collect();

        // No-object confidence over every non-responsible predictor of supervised images.
        let mut obj_idx = Vec::new();
        let mut mask = Vec::new();
        for &i in &supervised {
            for a in 0..a_count {
                for v in 0..h {
                    for u in 0..w {
                        obj_idx.push(ix.at(i, a, 4, v, u));
                        let owned = resp
                            .iter()
                            .any(|t| t.image == i && t.anchor == a && t.cell == (u, v));
                        mask.push(if owned { 0.0 } else { noobj_w });
                    }
                }
            }
        }
        let n = obj_idx.len();
        let obj = g.gather(grid.var, obj_idx, vec![n])?;
        let obj = g.sigmoid(obj);
        let obj = g.sqr(obj);
        let obj = g.mul_const(obj, Tensor::new(vec![n], mask)?)?;
        let noobj = g.sum(obj);
        parts.noobj += g.value(noobj).to_scalar()? as f64;
        terms.push(noobj);

        if resp.is_empty() {
            continue;
        }
        let r = resp.len();
        let pick = |c: usize| -> Vec<usize> {
            resp.iter()
                .map(|t| ix.at(t.image, t.anchor, c, t.cell.1, t.cell.0))
                .collect()
        };

        // Center offsets.
        let mut idx = pick(0);
        idx.extend(pick(1));
        let mut want: Vec<f32> = resp.iter().map(|t| t.offset.0 as f32).collect();
        want.extend(resp.iter().map(|t| t.offset.1 as f32));
        let pred = g.gather(grid.var, idx, vec![2 * r])?;
        let pred = g.sigmoid(pred);
        let want = g.constant(Tensor::new(vec![2 * r], want)?);
        let diff = g.sub(pred, want)?;
        let sq = g.sqr(diff);
        let s = g.sum(sq);
        let xy = g.scale(s, coord);
        parts.xy += g.value(xy).to_scalar()? as f64;
        terms.push(xy);

        // Square-root sizes: sqrt(anchor * exp(t)) = sqrt(anchor) * exp(t / 2).
        let mut idx = pick(2);
        idx.extend(pick(3));
        let anchor_root: Vec<f32> = resp
            .iter()
            .map(|t| anchors.get(k, t.anchor).0.sqrt() as f32)
            .chain(
                resp.iter()
                    .map(|t| anchors.get(k, t.anchor).1.sqrt() as f32),
            )
            .collect();
        let want: Vec<f32> = resp
            .iter()
            .map(|t| t.w.sqrt() as f32)
            .chain(resp.iter().map(|t| t.h.sqrt() as f32))
            .collect();
        let pred = g.gather(grid.var, idx, vec![2 * r])?;
        let pred = g.clamp(pred, -MAX_LOG_SCALE, MAX_LOG_SCALE);
        let pred = g.scale(pred, 0.5);
        let pred = g.exp(pred);
        let pred = g.mul_const(pred, Tensor::new(vec![2 * r], anchor_root)?)?;
        let want = g.constant(Tensor::new(vec![2 * r], want)?);
        let diff = g.sub(pred, want)?;
        let sq = g.sqr(diff);
        let s = g.sum(sq);
        let wh = g.scale(s, coord);
        parts.wh += g.value(wh).to_scalar()? as f64;
        terms.push(wh);

        // Responsible objectness toward 1.
        let pred = g.gather(grid.var, pick(4), vec![r])?;
        let pred = g.sigmoid(pred);
        let miss = g.affine(pred, 1.0, -1.0);
        let sq = g.sqr(miss);
        let s = g.sum(sq);
        let objt = g.scale(s, norm);
        parts.obj += g.value(objt).to_scalar()? as f64;
        terms.push(objt);

        // Class scores toward one-hot.
        let mut idx = Vec::with_capacity(r * num_classes);
        let mut onehot = Vec::with_capacity(r * num_classes);
        for t in &resp {
            for c in 0..num_classes {
                idx.push(ix.at(t.image, t.anchor, 5 + c, t.cell.1, t.cell.0));
                onehot.push(if c == t.class_id { 1.0 } else { 0.0 });
            }
        }
        let len = idx.len();
        let pred = g.gather(grid.var, idx, vec![len])?;
        let pred = g.sigmoid(pred);
        let want = g.constant(Tensor::new(vec![len], onehot)?);
        let diff = g.sub(pred, want)?;
        let sq = g.sqr(diff);
        let s = g.sum(sq);
        let cls = g.scale(s, norm);
        parts.class += g.value(cls).to_scalar()? as f64;
        terms.push(cls);
    }
    let total = g.add_all(&terms)?;
    Ok(DetectionLoss { total, parts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;

    const BIG: f32 = 200.0;

    fn logit(p: f64) -> f32 {
        (p / (1.0 - p)).ln() as f32
    }

    /// Grids whose raw values reproduce every target exactly and give zero
    /// objectness everywhere else.
    fn perfect_grids(
        targets: &[Target],
        sizes: [(usize, usize); 3],
        anchors: &Anchors,
        m: usize,
        batch: usize,
    ) -> Vec<Tensor> {
        let a = anchors.per_scale_count();
        let s = 5 + m;
        (0..3)
            .map(|k| {
                let (h, w) = sizes[k];
                let ix = GridIndex {
                    anchors: a,
                    stride: s,
                    h,
                    w,
                };
                let mut t = Tensor::zeros(vec![batch, a * s, h, w]);
                let d = t.data_mut();
                for b in 0..batch {
                    for an in 0..a {
                        for v in 0..h {
                            for u in 0..w {
                                d[ix.at(b, an, 4, v, u)] = -BIG;
                            }
                        }
                    }
                }
                for tg in targets.iter().filter(|t| t.scale == k) {
                    let (u, v) = tg.cell;
                    let (aw, ah) = anchors.get(k, tg.anchor);
                    d[ix.at(tg.image, tg.anchor, 0, v, u)] = logit(tg.offset.0);
                    d[ix.at(tg.image, tg.anchor, 1, v, u)] = logit(tg.offset.1);
                    d[ix.at(tg.image, tg.anchor, 2, v, u)] = (tg.w / aw).ln() as f32;
                    d[ix.at(tg.image, tg.anchor, 3, v, u)] = (tg.h / ah).ln() as f32;
                    d[ix.at(tg.image, tg.anchor, 4, v, u)] = BIG;
                    for c in 0..m {
                        d[ix.at(tg.image, tg.anchor, 5 + c, v, u)] =
                            if c == tg.class_id { BIG } else { -BIG };
                    }
                }
                t
            })
            .collect()
    }

    fn loss_of(
        grids: &[Tensor],
        anns: &[Option<&[BoxAnnotation]>],
        m: usize,
    ) -> DetectionLossParts {
        let anchors = Anchors::default();
        let mut g = Graph::new();
        let vars: Vec<DetectionGrid> = grids
            .iter()
            .enumerate()
            .map(|(k, t)| DetectionGrid {
                scale: k,
                var: g.variable(t.clone()),
            })
            .collect();
        let grids = [vars[0], vars[1], vars[2]];
        detection_loss(&mut g, &grids, anns, &anchors, m, LossWeights::default())
            .unwrap()
            .parts
    }

    const SIZES: [(usize, usize); 3] = [(16, 16), (8, 8), (4, 4)];

    #[test]
    fn exact_predictions_give_zero() {
        let anns = vec![
            BoxAnnotation::new(0, 0.3, 0.4, 0.07, 0.06),
            BoxAnnotation::new(2, 0.7, 0.6, 0.3, 0.35),
        ];
        let anchors = Anchors::default();
        let targets = assign_targets(&[Some(&anns)], SIZES, &anchors, 3).unwrap();
        assert_eq!(targets.len(), 2);
        let grids = perfect_grids(&targets, SIZES, &anchors, 3, 1);
        let parts = loss_of(&grids, &[Some(&anns)], 3);
        assert!(parts.total().abs() < 1e-9, "{parts:?}");
    }

    #[test]
    fn x_offset_error_weighted_by_coord() {
        let anns = vec![BoxAnnotation::new(1, 0.3, 0.4, 0.07, 0.06)];
        let anchors = Anchors::default();
        let targets = assign_targets(&[Some(&anns)], SIZES, &anchors, 3).unwrap();
        let mut grids = perfect_grids(&targets, SIZES, &anchors, 3, 1);
        let t = &targets[0];
        let ix = GridIndex {
            anchors: 3,
            stride: 8,
            h: SIZES[t.scale].0,
            w: SIZES[t.scale].1,
        };
        grids[t.scale].data_mut()[ix.at(0, t.anchor, 0, t.cell.1, t.cell.0)] =
            logit(t.offset.0 + 0.1);
        let parts = loss_of(&grids, &[Some(&anns)], 3);
        assert!((parts.total() - 0.05).abs() < 1e-5, "{parts:?}");
        assert!((parts.xy - 0.05).abs() < 1e-5);
    }

    #[test]
    fn unannotated_image_with_zero_confidence() {
        let empty: Vec<BoxAnnotation> = vec![];
        let grids = perfect_grids(&[], SIZES, &Anchors::default(), 3, 1);
        let parts = loss_of(&grids, &[Some(&empty)], 3);
        assert_eq!(parts.total(), 0.0);
    }

    #[test]
    fn unsupervised_images_are_ignored() {
        let anns = vec![BoxAnnotation::new(0, 0.5, 0.5, 0.1, 0.1)];
        let anchors = Anchors::default();
        let targets = assign_targets(&[Some(&anns), None], SIZES, &anchors, 3).unwrap();
        let mut grids = perfect_grids(&targets, SIZES, &anchors, 3, 2);
        // Garbage in the second image must not matter.
        for g in grids.iter_mut() {
            let half = g.numel() / 2;
            g.data_mut()[half..].fill(3.0);
        }
        let parts = loss_of(&grids, &[Some(&anns), None], 3);
        assert!(parts.total().abs() < 1e-9);
    }

    #[test]
    fn class_out_of_range_is_validation_error() {
        let anns = vec![BoxAnnotation::new(3, 0.5, 0.5, 0.1, 0.1)];
        let err = assign_targets(&[Some(&anns)], SIZES, &Anchors::default(), 3).unwrap_err();
        assert!(matches!(err, crate::Error::Validation(_)));
    }

    #[test]
    fn colliding_boxes_resolved_independent_of_order() {
        let a = BoxAnnotation::new(0, 0.51, 0.51, 0.06, 0.06);
        let b = BoxAnnotation::new(1, 0.52, 0.52, 0.065, 0.06);
        let anchors = Anchors::default();
        let t1 = assign_targets(&[Some(&[a, b][..])], SIZES, &anchors, 3).unwrap();
        let t2 = assign_targets(&[Some(&[b, a][..])], SIZES, &anchors, 3).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(t1.len(), 1);
        assert_eq!(t1[0].class_id, 1);
    }

    #[test]
    fn larger_boxes_go_to_coarser_scales() {
        let cfg = ModelConfig::default();
        assert_eq!(best_anchor(&cfg.anchors, 0.06, 0.06).0, 0);
        assert_eq!(best_anchor(&cfg.anchors, 0.2, 0.26), (1, 2));
        assert_eq!(best_anchor(&cfg.anchors, 0.45, 0.5).0, 2);
    }
}
