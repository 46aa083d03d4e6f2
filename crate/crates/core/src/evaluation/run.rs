use std::path::Path;

use crate::autograd::{Graph, ParamStore};
use crate::data::{load_dataset, Dataset, Manifest, SplitId};
use crate::error::{validation_err, Result};
use crate::model::{decode_detections, DecodeParams, Detection, Detector};
use crate::sample::ImageSample;
use crate::tensor::Tensor;
use crate::training::Checkpoint;

use super::ap::{average_precision, ApTable, GroundTruth, ScoredBox};

/// Images per inference graph.
pub const INFERENCE_BATCH: usize = 8;

/// Stack samples into a `[B, 3, H, W]` batch.
pub fn stack_pixels(samples: &[&ImageSample]) -> Result<Tensor> {
    let pixels: Vec<Tensor> = samples.iter().map(|s| s.pixels.clone()).collect();
    Tensor::stack(&pixels)
}

/// Decoded detections for every sample, in input order.
pub fn predict(
    detector: &Detector,
    params: &ParamStore,
    samples: &[&ImageSample],
    decode: DecodeParams,
) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(INFERENCE_BATCH) {
        let mut g = Graph::inference();
        let x = g.constant(stack_pixels(chunk)?);
        let (_, grids) = detector.forward(&mut g, params, x)?;
        let values = grids.map(|grid| g.value(grid.var));
        out.extend(decode_detections(
            &values,
            &detector.config().anchors,
            decode,
        )?);
    }
    Ok(out)
}

/// Flatten per-image detections into ranked-box form.
pub fn scored_boxes(per_image: &[Vec<Detection>]) -> Vec<ScoredBox> {
    per_image
        .iter()
        .enumerate()
        .flat_map(|(image, dets)| {
            dets.iter().map(move |d| ScoredBox {
                image,
                class_id: d.class_id(),
                score: d.score().clamp(0.0, 1.0),
                bbox: d.bbox,
            })
        })
        .collect()
}

pub fn ground_truth(samples: &[&ImageSample]) -> Vec<GroundTruth> {
    samples
        .iter()
        .enumerate()
        .flat_map(|(image, s)| {
            s.annotations.iter().map(move |a| GroundTruth {
                image,
                class_id: a.class_id,
                bbox: a.bbox(),
            })
        })
        .collect()
}

/// AP table of a detector on an annotated dataset.
pub fn evaluate_detector(
    detector: &Detector,
    params: &ParamStore,
    dataset: &Dataset,
    decode: DecodeParams,
    iou_threshold: f64,
) -> Result<ApTable> {
    if dataset.is_empty() {
        return Err(validation_err!(
            "cannot evaluate on an empty split ({})",
            dataset.split
        ));
    }
    if !dataset.split.annotated() {
        return Err(validation_err!(
            "split {} carries no annotations",
            dataset.split
        ));
    }
    let m = detector.config().num_classes;
    if dataset.num_classes() != m {
        return Err(validation_err!(
            "model predicts {m} classes but the dataset lists {}",
            dataset.num_classes()
        ));
    }
    let samples: Vec<&ImageSample> = dataset.samples.iter().collect();
    let dets = predict(detector, params, &samples, decode)?;
    average_precision(
        &scored_boxes(&dets),
        &ground_truth(&samples),
        &dataset.class_names,
        iou_threshold,
    )
}

/// Load a checkpoint and a split from disk and evaluate.
pub fn evaluate_map(
    checkpoint: &Path,
    manifest: &Path,
    split: SplitId,
    decode: DecodeParams,
    iou_threshold: f64,
) -> Result<ApTable> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (m, _) = Manifest::read(manifest)?;
    if m.class_names.len() != ckpt.header.model.num_classes {
        return Err(validation_err!(
            "checkpoint has {} classes, manifest lists {}",
            ckpt.header.model.num_classes,
            m.class_names.len()
        ));
    }
    let dataset = load_dataset(manifest, split)?;
    let detector = Detector::new(ckpt.header.model.clone())?;
    evaluate_detector(&detector, &ckpt.params, &dataset, decode, iou_threshold)
}
