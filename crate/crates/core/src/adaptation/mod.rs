//! Domain adaptation heads: image-level alignment over the three backbone taps,
//! instance-level alignment over pooled detections, and the consensus term
//! tying the two together.

mod classifier;
mod losses;
mod roi;

pub use classifier::{
    AdaptationConfig, DomainClassifiers, DomainProbMap, InstanceProbs, ADAPTATION_PREFIX,
};
pub use losses::{mlcr_loss, msia_loss, ria_loss, ScaleWeights, EPS};
pub use roi::{roi_pool, InstanceFeatures, Roi};

use crate::bbox::BBox;
use crate::model::{best_anchor, Anchors, Detection, NUM_SCALES};
use crate::sample::BoxAnnotation;

/// Group detections by scale, keeping at most `top_k` per image and scale by objectness.
pub fn select_instances(per_image: &[Vec<Detection>], top_k: usize) -> [Vec<Roi>; NUM_SCALES] {
    let mut out: [Vec<Roi>; NUM_SCALES] = Default::default();
    for (image, dets) in per_image.iter().enumerate() {
        for (k, rois) in out.iter_mut().enumerate() {
            let mut at_scale: Vec<&Detection> = dets
                .iter()
                .filter(|d| d.scale == k && has_area(d.bbox))
                .collect();
            at_scale.sort_by(|a, b| b.objectness.total_cmp(&a.objectness));
            rois.extend(at_scale.into_iter().take(top_k).map(|d| Roi {
                image,
                bbox: d.bbox,
            }));
        }
    }
    out
}

/// Zero-area boxes (after clamping to the image) cannot be pooled.
fn has_area(b: BBox) -> bool {
    let (x1, y1, x2, y2) = b.clamp_unit().corners();
    x2 > x1 && y2 > y1
}

/// Ground-truth boxes as instances, each at the scale that owns it in the detection loss.
pub fn instances_from_annotations(
    per_image: &[&[BoxAnnotation]],
    anchors: &Anchors,
) -> [Vec<Roi>; NUM_SCALES] {
    let mut out: [Vec<Roi>; NUM_SCALES] = Default::default();
    for (image, anns) in per_image.iter().enumerate() {
        for ann in anns.iter() {
            let (k, _) = best_anchor(anchors, ann.w, ann.h);
            out[k].push(Roi {
                image,
                bbox: ann.bbox().clamp_unit(),
            });
        }
    }
    out
}
