//! Domain-separability and consensus probes on image-level classifiers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    instances_from_annotations, ria_loss, roi_pool, DomainClassifiers, DomainProbMap, ScaleWeights,
};
use crate::autograd::{Graph, ParamStore};
use crate::error::{validation_err, Result};
use crate::model::{Detector, NUM_SCALES};
use crate::sample::{DomainLabel, ImageSample};
use crate::tensor::Tensor;
use crate::training::Sgd;

use super::run::{stack_pixels, INFERENCE_BATCH};

const IMAGE_HEAD_PREFIX: &str = "adaptation.image";

fn prob_maps(
    detector: &Detector,
    classifiers: &DomainClassifiers,
    params: &ParamStore,
    g: &mut Graph,
    chunk: &[&ImageSample],
) -> Result<Vec<DomainProbMap>> {
    let x = g.constant(stack_pixels(chunk)?);
    let maps = detector.backbone_forward(g, params, x)?;
    maps.iter()
        .map(|m| classifiers.image_classifier(g, params, m.scale, m.var, 0.0))
        .collect()
}

/// Per-location domain accuracy at the 0.5 threshold, averaged over the three
/// scales and then over images.
pub fn image_domain_accuracy(
    detector: &Detector,
    classifiers: &DomainClassifiers,
    params: &ParamStore,
    samples: &[&ImageSample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(validation_err!("probe set is empty"));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(INFERENCE_BATCH) {
        let mut g = Graph::inference();
        let probs = prob_maps(detector, classifiers, params, &mut g, chunk)?;
        for (i, sample) in chunk.iter().enumerate() {
            let target = sample.domain == DomainLabel::Target;
            let mut per_image = 0.0;
            for p in &probs {
                let (_, _, h, w) = g.value(p.var).dims4()?;
                let cells = &g.value(p.var).data()[i * h * w..(i + 1) * h * w];
                let correct = cells.iter().filter(|&&v| (v > 0.5) == target).count();
                per_image += correct as f64 / (h * w) as f64;
            }
            total += per_image / probs.len() as f64;
        }
    }
    Ok(total / samples.len() as f64)
}

/// Mean `|mean(image-level map) - instance probability|` over the annotated boxes
/// of `samples`, each box pooled at the scale that owns it.
pub fn consensus_gap(
    detector: &Detector,
    classifiers: &DomainClassifiers,
    params: &ParamStore,
    samples: &[&ImageSample],
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    let pool = classifiers.config().pool_size;
    for chunk in samples.chunks(INFERENCE_BATCH) {
        let mut g = Graph::inference();
        let x = g.constant(stack_pixels(chunk)?);
        let maps = detector.backbone_forward(&mut g, params, x)?;
        let anns: Vec<&[_]> = chunk.iter().map(|s| s.annotations.as_slice()).collect();
        let rois = instances_from_annotations(&anns, &detector.config().anchors);
        for k in 0..NUM_SCALES {
            if rois[k].is_empty() {
                continue;
            }
            let map = classifiers.image_classifier(&mut g, params, k, maps[k].var, 0.0)?;
            let feats = roi_pool(&mut g, &maps[k], &rois[k], pool)?;
            let probs = classifiers.instance_classifier(&mut g, params, &feats, 0.0)?;
            let (_, _, h, w) = g.value(map.var).dims4()?;
            let mvals = g.value(map.var).data();
            for (roi, &p) in rois[k].iter().zip(g.value(probs.var).data()) {
                let cells = &mvals[roi.image * h * w..(roi.image + 1) * h * w];
                let mean = cells.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64;
                sum += (mean - p as f64).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(validation_err!("consensus probe needs annotated boxes"));
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.001,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Train fresh image-level classifiers (no gradient reversal) on top of a
/// frozen backbone. Returns the backbone parameters together with the new
/// classifier weights, ready for [`image_domain_accuracy`].
pub fn train_domain_probe(
    detector: &Detector,
    classifiers: &DomainClassifiers,
    backbone: &ParamStore,
    source: &[&ImageSample],
    target: &[&ImageSample],
    config: ProbeConfig,
) -> Result<ParamStore> {
    if source.is_empty() || target.is_empty() {
        return Err(validation_err!(
            "probe training needs source and target images"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = backbone.clone();
    params.extend(
        classifiers
            .init_params(&mut rng)
            .filter_prefix(IMAGE_HEAD_PREFIX),
    );

    // Backbone is frozen, so every image's taps are computed once.
    let taps = |set: &[&ImageSample]| -> Result<Vec<[Tensor; NUM_SCALES]>> {
        let mut out = Vec::with_capacity(set.len());
        for chunk in set.chunks(INFERENCE_BATCH) {
            let mut g = Graph::inference();
            let x = g.constant(stack_pixels(chunk)?);
            let maps = detector.backbone_forward(&mut g, &params, x)?;
            for i in 0..chunk.len() {
                out.push([
                    g.value(maps[0].var).select(i)?,
                    g.value(maps[1].var).select(i)?,
                    g.value(maps[2].var).select(i)?,
                ]);
            }
        }
        Ok(out)
    };
    let src_taps = taps(source)?;
    let tgt_taps = taps(target)?;

    let weights = ScaleWeights::equal(1.0)?;
    let labels = [DomainLabel::Source, DomainLabel::Target];
    let mut opt = Sgd::new(config.momentum, 0.0);
    for _ in 0..config.steps {
        let s = &src_taps[rng.random_range(0..src_taps.len())];
        let t = &tgt_taps[rng.random_range(0..tgt_taps.len())];
        let mut g = Graph::new();
        let mut probs = Vec::with_capacity(NUM_SCALES);
        for k in 0..NUM_SCALES {
            let pair = g.constant(Tensor::stack(&[s[k].clone(), t[k].clone()])?);
            probs.push(classifiers.image_classifier(&mut g, &params, k, pair, 0.0)?);
        }
        let loss = ria_loss(&mut g, &probs, &labels, &weights)?;
        let grads = g.backward(loss)?;
        let grads = grads.params(&g);
        opt.step(&mut params, &grads, |_| config.lr)?;
    }
    Ok(params)
}
