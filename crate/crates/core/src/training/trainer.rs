use std::borrow::Cow;
use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bundle::{LossBundle, MetricsLine};
use super::checkpoint::Checkpoint;
use super::config::{ImageAlignment, TrainConfig};
use super::optim::{grad_norm, Sgd};
use crate::adaptation::{
    instances_from_annotations, mlcr_loss, msia_loss, ria_loss, roi_pool, select_instances,
    DomainClassifiers, DomainProbMap, InstanceProbs, ADAPTATION_PREFIX,
};
use crate::autograd::{Graph, ParamStore, Var};
use crate::data::{child_seed, Dataset};
use crate::error::{validation_err, Error, Result};
use crate::evaluation::{evaluate_detector, stack_pixels, ApTable, DEFAULT_IOU};
use crate::model::{
    decode_detections, detection_loss, DecodeParams, Detector, BACKBONE_PREFIX, DETECTOR_PREFIX,
    NUM_SCALES,
};
use crate::sample::{BoxAnnotation, DomainLabel, ImageSample};
use crate::tensor::Tensor;

/// Bundles kept for the divergence report.
pub const RECENT_BUNDLES: usize = 10;
/// `l_total` above this aborts training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

const STREAM_INIT: u64 = 100;
const STREAM_SOURCE_ORDER: u64 = 101;
const STREAM_TARGET_ORDER: u64 = 102;
const STREAM_SOURCE_FLIP: u64 = 103;
const STREAM_TARGET_FLIP: u64 = 104;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "ckpt.safetensors";
pub const CONFIG_FILE: &str = "config.toml";
pub const DIVERGENCE_FILE: &str = "divergence.jsonl";

/// Model, domain classifiers, weights and optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    detector: Detector,
    classifiers: DomainClassifiers,
    params: ParamStore,
    opt: Sgd,
    step: usize,
    recent: VecDeque<LossBundle>,
}

impl Trainer {
    /// Fresh weights drawn from the config seed.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let detector = Detector::new(config.model.clone())?;
        let classifiers = DomainClassifiers::new(&config.model, config.adaptation.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(config.seed, STREAM_INIT, 0));
        let mut params = detector.init_params(&mut rng);
        params.extend(classifiers.init_params(&mut rng));
        Ok(Self::assemble(config, detector, classifiers, params))
    }

    /// Resume from saved weights; the optimizer state starts from zero.
    pub fn from_checkpoint(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config)?;
        for (name, value) in ckpt.params.iter() {
            let slot = t.params.get_mut(name)?;
            if slot.shape() != value.shape() {
                return Err(validation_err!(
                    "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                    value.shape(),
                    slot.shape()
                ));
            }
            *slot = value.clone();
        }
        t.step = ckpt.header.step;
        Ok(t)
    }

    fn assemble(
        config: TrainConfig,
        detector: Detector,
        classifiers: DomainClassifiers,
        params: ParamStore,
    ) -> Self {
        let opt = Sgd::new(config.momentum, config.weight_decay);
        Self {
            config,
            detector,
            classifiers,
            params,
            opt,
            step: 0,
            recent: VecDeque::with_capacity(RECENT_BUNDLES),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn classifiers(&self) -> &DomainClassifiers {
        &self.classifiers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Learning rate of a parameter: backbone weights use `lr_backbone`, everything else `lr_rest`.
    pub fn lr_for(&self, name: &str) -> f64 {
        if name.starts_with(BACKBONE_PREFIX) {
            self.config.lr_backbone
        } else {
            self.config.lr_rest
        }
    }

    pub fn grl_lambda(&self) -> f64 {
        self.config.grl.lambda_at(self.step)
    }

    fn check_pair(&self, source: &ImageSample, target: Option<&ImageSample>) -> Result<()> {
        if source.domain != DomainLabel::Source {
            return Err(validation_err!(
                "sample {} is not a source image",
                source.id
            ));
        }
        let m = self.config.model.num_classes;
        for (i, a) in source.annotations.iter().enumerate() {
            a.validate(m)
                .map_err(|e| validation_err!("sample {} box {i}: {e}", source.id))?;
        }
        let Some(target) = target else {
            if self.config.adapts() {
                return Err(validation_err!(
                    "adaptation is enabled but no target image was given"
                ));
            }
            return self.check_size(source);
        };
        if target.domain != DomainLabel::Target {
            return Err(validation_err!(
                "sample {} is not a target image",
                target.id
            ));
        }
        if !target.annotations.is_empty() {
            return Err(validation_err!(
                "target sample {} carries {} annotations; target training data must be unlabeled",
                target.id,
                target.annotations.len()
            ));
        }
        self.check_size(source)?;
        self.check_size(target)
    }

    fn check_size(&self, sample: &ImageSample) -> Result<()> {
        let s = self.config.image_size;
        if sample.height() != s || sample.width() != s {
            return Err(validation_err!(
                "sample {} is {}x{}, config expects {s}x{s}",
                sample.id,
                sample.height(),
                sample.width()
            ));
        }
        Ok(())
    }

    /// Loss bundle and parameter gradients of one pair at the current weights.
    ///
    /// With every adaptation term off the target image may be omitted and is
    /// never read.
    pub fn pair_gradients(
        &self,
        source: &ImageSample,
        target: Option<&ImageSample>,
    ) -> Result<(LossBundle, BTreeMap<String, Tensor>)> {
        self.check_pair(source, target)?;
        let cfg = &self.config;
        let adapt = cfg.adapts();
        let batch: Vec<&ImageSample> = match target {
            Some(t) if adapt => vec![source, t],
            _ => vec![source],
        };
        let labels: Vec<DomainLabel> = batch.iter().map(|s| s.domain).collect();

        let mut g = Graph::new();
        let x = g.constant(stack_pixels(&batch)?);
        let (maps, grids) = self.detector.forward(&mut g, &self.params, x)?;
        let mut anns: Vec<Option<&[BoxAnnotation]>> = vec![Some(&source.annotations)];
        if adapt {
            anns.push(None);
        }
        let det = detection_loss(
            &mut g,
            &grids,
            &anns,
            &cfg.model.anchors,
            cfg.model.num_classes,
            cfg.loss,
        )?;

        let lambda_grl = self.grl_lambda() as f32;
        let mut image_maps: Vec<DomainProbMap> = Vec::new();
        if cfg.needs_image_maps() {
            for m in &maps {
                image_maps.push(self.classifiers.image_classifier(
                    &mut g,
                    &self.params,
                    m.scale,
                    m.var,
                    lambda_grl,
                )?);
            }
        }
        let mut instance_probs: Vec<InstanceProbs> = Vec::new();
        if cfg.needs_instances() {
            let values = grids.map(|grid| g.value(grid.var));
            let decode = DecodeParams {
                conf_threshold: cfg.instance_conf,
                nms_iou: cfg.nms_iou,
            };
            let mut dets = decode_detections(&values, &cfg.model.anchors, decode)?;
            let mut rois = if cfg.msia_source_gt {
                dets[0].clear();
                instances_from_annotations(&[&source.annotations], &cfg.model.anchors)
            } else {
                Default::default()
            };
            for (all, picked) in rois
                .iter_mut()
                .zip(select_instances(&dets, cfg.instance_top_k))
            {
                all.extend(picked);
            }
            for k in 0..NUM_SCALES {
                if rois[k].is_empty() {
                    continue;
                }
                let feats = roi_pool(&mut g, &maps[k], &rois[k], cfg.adaptation.pool_size)?;
                instance_probs.push(self.classifiers.instance_classifier(
                    &mut g,
                    &self.params,
                    &feats,
                    lambda_grl,
                )?);
            }
        }

        let zero = |g: &mut Graph| g.constant(Tensor::scalar(0.0));
        let ria = if cfg.image_alignment != ImageAlignment::Off {
            ria_loss(&mut g, &image_maps, &labels, &cfg.image_weights())?
        } else {
            zero(&mut g)
        };
        let msia = if cfg.msia {
            msia_loss(&mut g, &instance_probs, &labels, &cfg.scale_weights)?
        } else {
            zero(&mut g)
        };
        let mlcr = if cfg.mlcr {
            mlcr_loss(&mut g, &image_maps, &instance_probs, batch.len())?
        } else {
            zero(&mut g)
        };

        let scalar = |g: &Graph, v: Var| g.value(v).data()[0] as f64;
        let bundle = LossBundle::new(
            self.step,
            scalar(&g, det.total),
            scalar(&g, ria),
            scalar(&g, msia),
            scalar(&g, mlcr),
            cfg.lambda_da,
        )?;

        let total = if adapt {
            let adv = g.add_all(&[ria, msia, mlcr])?;
            let adv = g.scale(adv, cfg.lambda_da as f32);
            g.add(det.total, adv)?
        } else {
            det.total
        };
        let grads = g.backward(total)?.params(&g);
        Ok((bundle, grads))
    }

    fn remember(&mut self, bundle: LossBundle) {
        if self.recent.len() == RECENT_BUNDLES {
            self.recent.pop_front();
        }
        self.recent.push_back(bundle);
    }

    fn diverged(&self, message: String) -> Error {
        Error::Divergence {
            message,
            recent: self.recent.iter().copied().collect(),
        }
    }

    /// The last bundles seen, oldest first.
    pub fn recent_bundles(&self) -> Vec<LossBundle> {
        self.recent.iter().copied().collect()
    }

    /// One optimizer step on the mean gradient of `pairs`. Returns the mean
    /// bundle measured before the update.
    pub fn train_pairs(
        &mut self,
        pairs: &[(&ImageSample, Option<&ImageSample>)],
    ) -> Result<LossBundle> {
        if pairs.is_empty() {
            return Err(validation_err!("a training step needs at least one pair"));
        }
        let mut bundles = Vec::with_capacity(pairs.len());
        let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
        for (s, t) in pairs {
            let (b, grads) = match self.pair_gradients(s, *t) {
                Ok(r) => r,
                Err(Error::Divergence { message, .. }) => return Err(self.diverged(message)),
                Err(e) => return Err(e),
            };
            bundles.push(b);
            for (name, grad) in grads {
                match sum.get_mut(&name) {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += v;
                        }
                    }
                    None => {
                        sum.insert(name, grad);
                    }
                }
            }
        }
        let bundle = LossBundle::mean(self.step, &bundles)?;
        self.remember(bundle);
        if !(bundle.l_total <= DIVERGENCE_LIMIT) {
            return Err(self.diverged(format!("l_total {} at step {}", bundle.l_total, self.step)));
        }
        let inv = 1.0 / pairs.len() as f32;
        for grad in sum.values_mut() {
            grad.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        let norm = grad_norm(&sum);
        if !norm.is_finite() {
            return Err(self.diverged(format!("non-finite gradient at step {}", self.step)));
        }
        if self.config.max_grad_norm > 0.0 {
            for prefix in [DETECTOR_PREFIX, ADAPTATION_PREFIX] {
                clip_section(&mut sum, prefix, self.config.max_grad_norm);
            }
        }
        let lrs: BTreeMap<String, f64> = sum.keys().map(|n| (n.clone(), self.lr_for(n))).collect();
        self.opt.step(&mut self.params, &sum, |n| lrs[n])?;
        self.step += 1;
        Ok(bundle)
    }

    /// One source image and one target image; see [`Trainer::train_pairs`].
    pub fn train_step(&mut self, source: &ImageSample, target: &ImageSample) -> Result<LossBundle> {
        self.train_pairs(&[(source, Some(target))])
    }

    pub fn evaluate(&self, dataset: &Dataset) -> Result<ApTable> {
        evaluate_detector(
            &self.detector,
            &self.params,
            dataset,
            self.config.decode_params(),
            DEFAULT_IOU,
        )
    }

    pub fn checkpoint(&self, class_names: Vec<String>) -> Checkpoint {
        Checkpoint::new(
            self.config.hash(),
            self.step,
            self.config.model.clone(),
            self.config.adaptation.clone(),
            class_names,
            self.params.clone(),
        )
    }
}

/// Rescale the gradients of one parameter section to at most `max_norm`.
fn clip_section(grads: &mut BTreeMap<String, Tensor>, prefix: &str, max_norm: f64) {
    let sq: f64 = grads
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .flat_map(|(_, t)| t.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let f = (max_norm / norm) as f32;
        for (_, t) in grads.iter_mut().filter(|(n, _)| n.starts_with(prefix)) {
            t.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }
}

/// Mirror an image left to right, boxes included.
pub fn hflip(sample: &ImageSample) -> ImageSample {
    let (c, h, w) = sample.pixels.dims3().expect("samples are [3, H, W]");
    let src = sample.pixels.data();
    let mut data = vec![0.0f32; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                data[row + x] = src[row + w - 1 - x];
            }
        }
    }
    ImageSample {
        id: sample.id.clone(),
        domain: sample.domain,
        pixels: Tensor::new(sample.pixels.shape().to_vec(), data).expect("same size"),
        annotations: sample
            .annotations
            .iter()
            .map(|a| BoxAnnotation {
                cx: 1.0 - a.cx,
                ..*a
            })
            .collect(),
    }
}

/// Endless reshuffled passes over `0..len`.
struct Cycle {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycle {
    fn new(len: usize, seed: u64) -> Self {
        let mut c = Self {
            order: (0..len).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        c.order.shuffle(&mut c.rng);
        c
    }

    fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn check_datasets(
    cfg: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
    val: Option<&Dataset>,
) -> Result<()> {
    if source.is_empty() {
        return Err(validation_err!("source training set is empty"));
    }
    if cfg.adapts() && target.is_empty() {
        return Err(validation_err!("target training set is empty"));
    }
    if !source.split.annotated() || source.split.domain != DomainLabel::Source {
        return Err(validation_err!(
            "source data must come from an annotated source split, got {}",
            source.split
        ));
    }
    if target.split.domain != DomainLabel::Target {
        return Err(validation_err!(
            "target data must come from a target split, got {}",
            target.split
        ));
    }
    if let Some(i) = target
        .samples
        .iter()
        .position(|s| !s.annotations.is_empty())
    {
        return Err(validation_err!(
            "target record {i} carries annotations; target training data must be unlabeled"
        ));
    }
    for ds in std::iter::once(source).chain(val) {
        if ds.num_classes() != cfg.model.num_classes {
            return Err(validation_err!(
                "{} lists {} classes, model has {}",
                ds.split,
                ds.num_classes(),
                cfg.model.num_classes
            ));
        }
    }
    Ok(())
}

/// Run `trainer.config().steps` optimizer steps, writing one JSON line per
/// step to `metrics` and calling `hook` after every step.
pub fn fit_with_hook(
    trainer: &mut Trainer,
    source: &Dataset,
    target: &Dataset,
    val: Option<&Dataset>,
    metrics: &mut dyn Write,
    hook: &mut dyn FnMut(&Trainer, &MetricsLine) -> Result<()>,
) -> Result<()> {
    let cfg = trainer.config().clone();
    check_datasets(&cfg, source, target, val)?;
    let mut src_order = Cycle::new(source.len(), child_seed(cfg.seed, STREAM_SOURCE_ORDER, 0));
    let mut tgt_order = Cycle::new(
        target.len().max(1),
        child_seed(cfg.seed, STREAM_TARGET_ORDER, 0),
    );
    let mut src_flip = ChaCha8Rng::seed_from_u64(child_seed(cfg.seed, STREAM_SOURCE_FLIP, 0));
    let mut tgt_flip = ChaCha8Rng::seed_from_u64(child_seed(cfg.seed, STREAM_TARGET_FLIP, 0));
    for _ in 0..cfg.steps {
        let mut batch: Vec<(Cow<ImageSample>, Option<Cow<ImageSample>>)> =
            Vec::with_capacity(cfg.accumulation);
        for _ in 0..cfg.accumulation {
            let s = &source.samples[src_order.next_index()];
            let s = if cfg.hflip && src_flip.random_bool(0.5) {
                Cow::Owned(hflip(s))
            } else {
                Cow::Borrowed(s)
            };
            let t = if cfg.adapts() {
                let t = &target.samples[tgt_order.next_index()];
                Some(if cfg.hflip && tgt_flip.random_bool(0.5) {
                    Cow::Owned(hflip(t))
                } else {
                    Cow::Borrowed(t)
                })
            } else {
                None
            };
            batch.push((s, t));
        }
        let borrowed: Vec<(&ImageSample, Option<&ImageSample>)> = batch
            .iter()
            .map(|(s, t)| (s.as_ref(), t.as_deref()))
            .collect();
        let bundle = trainer.train_pairs(&borrowed)?;
        let map = if cfg.eval_interval > 0 && trainer.step().is_multiple_of(cfg.eval_interval) {
            match val {
                Some(v) => Some(trainer.evaluate(v)?.map),
                None => None,
            }
        } else {
            None
        };
        let line = MetricsLine {
            losses: bundle,
            lr_backbone: cfg.lr_backbone,
            lr_rest: cfg.lr_rest,
            grl_lambda: cfg.grl.lambda_at(bundle.step),
            map,
        };
        let text = serde_json::to_string(&line).expect("metrics serialize");
        writeln!(metrics, "{text}").map_err(|e| Error::io("<metrics>", e))?;
        hook(trainer, &line)?;
    }
    metrics.flush().map_err(|e| Error::io("<metrics>", e))
}

/// Files written by [`fit`].
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub last: Option<LossBundle>,
    pub trainer: Trainer,
}

/// Train from scratch and write `config.toml`, `metrics.jsonl` and
/// `ckpt.safetensors` into `out_dir`. On divergence the last bundles are
/// written to `divergence.jsonl` before the error is returned.
pub fn fit(
    config: TrainConfig,
    source: &Dataset,
    target: &Dataset,
    val: Option<&Dataset>,
    out_dir: &Path,
) -> Result<FitOutcome> {
    let mut trainer = Trainer::new(config)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, trainer.config().to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let file = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    let mut last = None;
    let run = fit_with_hook(
        &mut trainer,
        source,
        target,
        val,
        &mut writer,
        &mut |_, line| {
            last = Some(line.losses);
            Ok(())
        },
    );
    writer.flush().map_err(|e| Error::io(&metrics_path, e))?;
    if let Err(Error::Divergence { message, recent }) = run {
        let path = out_dir.join(DIVERGENCE_FILE);
        let text: String = recent
            .iter()
            .map(|b| serde_json::to_string(b).expect("bundle serializes") + "\n")
            .collect();
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        return Err(Error::Divergence { message, recent });
    }
    run?;
    let checkpoint = trainer
        .checkpoint(source.class_names.clone())
        .save(&out_dir.join(CHECKPOINT_FILE))?;
    Ok(FitOutcome {
        checkpoint,
        metrics: metrics_path,
        last,
        trainer,
    })
}
