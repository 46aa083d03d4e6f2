//! Max pooling of feature-map regions under detection boxes.
//!
//! A box is mapped onto the feature grid, the covered region is cut into
//! `P x P` bins and every bin keeps the maximum activation per channel. The
//! winning positions are chosen from the forward values; gradients flow back
//! into the map through those positions only, so box coordinates act as
//! constants.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::bbox::BBox;
use crate::error::{validation_err, Result};
use crate::model::FeatureMap;

/// A box on a given image of the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub image: usize,
    pub bbox: BBox,
}

/// Pooled features of several boxes at one scale, `[N, C, P, P]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceFeatures {
    pub scale: usize,
    pub var: Var,
    pub rois: Vec<Roi>,
}

/// Half-open cell ranges `[start, end)` of each of the `pool` bins along one axis.
fn bins(lo: f64, hi: f64, cells: usize, pool: usize) -> Vec<(usize, usize)> {
    let first = (lo.floor().max(0.0) as usize).min(cells - 1);
    let last = (hi.ceil() as usize).clamp(first + 1, cells);
    let width = (hi - lo) / pool as f64;
    (0..pool)
        .map(|j| {
            let s = ((lo + j as f64 * width).floor().max(0.0) as usize).clamp(first, last - 1);
            let e = ((lo + (j + 1) as f64 * width).ceil() as usize).clamp(first, last);
            if e > s {
                (s, e)
            } else {
                // Empty bin: fall back to the nearest covered cell.
                (s, s + 1)
            }
        })
        .collect()
}

/// Pool every roi from `map`; all rois share the map's scale.
pub fn roi_pool(
    g: &mut Graph,
    map: &FeatureMap,
    rois: &[Roi],
    pool: usize,
) -> Result<InstanceFeatures> {
    if pool == 0 {
        return Err(validation_err!("pool size must be positive"));
    }
    let (batch, c, h, w) = g.value(map.var).dims4()?;
    let data = g.value(map.var).data();
    let mut indices = Vec::with_capacity(rois.len() * c * pool * pool);
    for roi in rois {
        if roi.image >= batch {
            return Err(validation_err!(
                "roi refers to image {} of a batch of {batch}",
                roi.image
            ));
        }
        let clamped = roi.bbox.clamp_unit();
        let (x1, y1, x2, y2) = clamped.corners();
        let (gx1, gx2) = (x1 * w as f64, x2 * w as f64);
        let (gy1, gy2) = (y1 * h as f64, y2 * h as f64);
        if !(gx2 - gx1 > 0.0) || !(gy2 - gy1 > 0.0) {
            return Err(validation_err!(
                "degenerate ROI ({}, {}, {}, {}) on a {h}x{w} grid",
                roi.bbox.cx,
                roi.bbox.cy,
                roi.bbox.w,
                roi.bbox.h
            ));
        }
        let xb = bins(gx1, gx2, w, pool);
        let yb = bins(gy1, gy2, h, pool);
        for ch in 0..c {
            let plane = (roi.image * c + ch) * h * w;
            for &(ys, ye) in &yb {
                for &(xs, xe) in &xb {
                    let mut best = plane + ys * w + xs;
                    for y in ys..ye {
                        for x in xs..xe {
                            let i = plane + y * w + x;
                            if data[i] > data[best] {
                                best = i;
                            }
                        }
                    }
                    indices.push(best);
                }
            }
        }
    }
    let var = g.gather(map.var, indices, vec![rois.len(), c, pool, pool])?;
    Ok(InstanceFeatures {
        scale: map.scale,
        var,
        rois: rois.to_vec(),
    })
}
