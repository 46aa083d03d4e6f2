//! Detection metrics, feature export and domain probes.

mod ap;
mod features;
mod probe;
mod run;

pub use ap::{
    all_point_ap, average_precision, match_detections, ApTable, ClassAp, GroundTruth, MatchRecord,
    MatchResult, ScoredBox, DEFAULT_IOU,
};
pub use features::{extract_features, read_features_csv, write_features_csv, FeatureRecord};
pub use probe::{consensus_gap, image_domain_accuracy, train_domain_probe, ProbeConfig};
pub use run::{
    evaluate_detector, evaluate_map, ground_truth, predict, scored_boxes, stack_pixels,
    INFERENCE_BATCH,
};
