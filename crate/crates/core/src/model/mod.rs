//! The one-stage detector: backbone, heads, decoding and the detection loss.

mod config;
mod decode;
mod detector;
mod loss;

pub use config::{Anchors, ModelConfig, NUM_SCALES, STRIDES};
pub use decode::{decode_detections, nms, DecodeParams, Detection};
pub use detector::{DetectionGrid, Detector, FeatureMap, BACKBONE_PREFIX, DETECTOR_PREFIX};
pub use loss::{
    assign_targets, best_anchor, detection_loss, DetectionLoss, DetectionLossParts, LossWeights,
    Target, MAX_LOG_SCALE,
};
