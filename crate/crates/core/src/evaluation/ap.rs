//! Per-class average precision at a fixed IoU threshold.
//!
//! Detections are ranked by descending score; ties fall back to ascending
//! image index and then to the box `(cx, cy, w, h)` in lexicographic order, so
//! the ranking does not depend on input order. Each detection, in rank order,
//! claims the unmatched ground-truth box of its image and class with the
//! highest IoU (lowest index on equal IoU) if that IoU reaches the threshold.
//! AP is the area under the monotone envelope of the precision/recall curve.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{validation_err, Result};

pub const DEFAULT_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image: usize,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

/// Outcome of one ranked detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub image: usize,
    pub class_id: usize,
    pub score: f64,
    pub matched: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// In rank order.
    pub records: Vec<MatchRecord>,
    /// Ground-truth count per class index.
    pub gt_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    #[serde(rename = "class")]
    pub class_id: usize,
    pub name: String,
    pub ap: f64,
    pub num_gt: usize,
    pub num_detections: usize,
    /// `(recall, precision)` after each ranked detection.
    pub pr: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApTable {
    pub iou_threshold: f64,
    /// Classes with at least one ground-truth box.
    pub classes: Vec<ClassAp>,
    /// Mean over `classes`; 0 when there are none.
    pub map: f64,
}

fn rank_order(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image.cmp(&b.image))
        .then(a.bbox.cx.total_cmp(&b.bbox.cx))
        .then(a.bbox.cy.total_cmp(&b.bbox.cy))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
        .then(a.class_id.cmp(&b.class_id))
}

/// Greedy matching of `detections` against `ground_truth`.
pub fn match_detections(
    detections: &[ScoredBox],
    ground_truth: &[GroundTruth],
    num_classes: usize,
    iou_threshold: f64,
) -> Result<MatchResult> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(validation_err!(
            "iou threshold must lie in (0, 1], got {iou_threshold}"
        ));
    }
    let mut gt_counts = vec![0usize; num_classes];
    for (i, gt) in ground_truth.iter().enumerate() {
        if gt.class_id >= num_classes {
            return Err(validation_err!(
                "ground truth {i} has class {} but only {num_classes} classes exist",
                gt.class_id
            ));
        }
        gt_counts[gt.class_id] += 1;
    }
    for (i, d) in detections.iter().enumerate() {
        if d.class_id >= num_classes {
            return Err(validation_err!(
                "detection {i} has class {} out of range",
                d.class_id
            ));
        }
        if !(0.0..=1.0).contains(&d.score) {
            return Err(validation_err!(
                "detection {i} has score {} outside [0, 1]",
                d.score
            ));
        }
    }
    let mut ranked = detections.to_vec();
    ranked.sort_by(rank_order);
    let mut taken = vec![false; ground_truth.len()];
    let records = ranked
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in ground_truth.iter().enumerate() {
                if taken[j] || gt.image != d.image || gt.class_id != d.class_id {
                    continue;
                }
                let iou = gt.bbox.iou(&d.bbox);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            MatchRecord {
                image: d.image,
                class_id: d.class_id,
                score: d.score,
                matched: best.is_some(),
            }
        })
        .collect();
    Ok(MatchResult { records, gt_counts })
}

/// Area under the monotone envelope of a PR curve given as `(recall, precision)` in rank order.
pub fn all_point_ap(pr: &[(f64, f64)]) -> f64 {
    let mut envelope: Vec<f64> = pr.iter().map(|&(_, p)| p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (&(r, _), &p) in pr.iter().zip(&envelope) {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// Per-class AP and their mean. `class_names` fixes the class count.
pub fn average_precision(
    detections: &[ScoredBox],
    ground_truth: &[GroundTruth],
    class_names: &[String],
    iou_threshold: f64,
) -> Result<ApTable> {
    let result = match_detections(detections, ground_truth, class_names.len(), iou_threshold)?;
    let mut classes = Vec::new();
    for (c, name) in class_names.iter().enumerate() {
        let num_gt = result.gt_counts[c];
        if num_gt == 0 {
            continue;
        }
        let mut tp = 0usize;
        let mut pr = Vec::new();
        for (n, rec) in result
            .records
            .iter()
            .filter(|r| r.class_id == c)
            .enumerate()
        {
            tp += usize::from(rec.matched);
            pr.push((tp as f64 / num_gt as f64, tp as f64 / (n + 1) as f64));
        }
        classes.push(ClassAp {
            class_id: c,
            name: name.clone(),
            ap: all_point_ap(&pr),
            num_gt,
            num_detections: pr.len(),
            pr,
        });
    }
    let map = if classes.is_empty() {
        0.0
    } else {
        classes.iter().map(|c| c.ap).sum::<f64>() / classes.len() as f64
    };
    Ok(ApTable {
        iou_threshold,
        classes,
        map,
    })
}

impl ApTable {
    /// Aligned plain-text table, one row per class plus the mean.
    pub fn render_text(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(0)
            .max("mAP".len());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>6}  {:>6}",
            "class", "AP", "GT", "dets"
        );
        for c in &self.classes {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7.4}  {:>6}  {:>6}",
                c.name, c.ap, c.num_gt, c.num_detections
            );
        }
        let _ = writeln!(out, "{:<width$}  {:>7.4}", "mAP", self.map);
        out
    }
}
