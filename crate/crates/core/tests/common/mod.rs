//! Scalar reference implementations, written loop by loop in f64, that the
//! library's graph-based code is checked against.
#![allow(dead_code)]

use rand::Rng;

pub const EPS: f64 = 1e-7;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Box as `[cx, cy, w, h]`.
pub type Rect = [f64; 4];

pub fn iou(a: Rect, b: Rect) -> f64 {
    let (ax1, ay1, ax2, ay2) = (
        a[0] - a[2] / 2.0,
        a[1] - a[3] / 2.0,
        a[0] + a[2] / 2.0,
        a[1] + a[3] / 2.0,
    );
    let (bx1, by1, bx2, by2) = (
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    );
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `-[d ln p + (1 - d) ln(1 - p)]` with `p` clamped to `[EPS, 1 - EPS]`.
pub fn bce(p: f64, d: f64) -> f64 {
    let p = p.clamp(EPS, 1.0 - EPS);
    let q = (1.0 - p).clamp(EPS, 1.0 - EPS);
    -(d * p.ln() + (1.0 - d) * q.ln())
}

/// Image-level alignment: `maps[i][k]` holds the probabilities of image `i` at scale `k`.
pub fn ria(maps: &[Vec<Vec<f64>>], labels: &[u8], weights: [f64; 3]) -> f64 {
    let mut total = 0.0;
    for (i, per_scale) in maps.iter().enumerate() {
        for (k, cells) in per_scale.iter().enumerate() {
            for &p in cells {
                total += weights[k] * bce(p, labels[i] as f64);
            }
        }
    }
    total / labels.len() as f64
}

/// One instance: `(image, scale, probability)`.
pub type Inst = (usize, usize, f64);

pub fn msia(instances: &[Inst], labels: &[u8], weights: [f64; 3]) -> f64 {
    let mut total = 0.0;
    for &(i, k, p) in instances {
        total += weights[k] * bce(p, labels[i] as f64);
    }
    total / labels.len() as f64
}

pub fn mlcr(maps: &[Vec<Vec<f64>>], instances: &[Inst]) -> f64 {
    let mut total = 0.0;
    for &(i, k, p) in instances {
        let cells = &maps[i][k];
        let mean = cells.iter().sum::<f64>() / cells.len() as f64;
        total += (mean - p).abs();
    }
    total / maps.len() as f64
}

/// Annotation as `(class, cx, cy, w, h)`.
pub type Ann = (usize, f64, f64, f64, f64);

pub struct GridSpec {
    pub sizes: [(usize, usize); 3],
    /// `anchors[k][a] = (w, h)`.
    pub anchors: [Vec<(f64, f64)>; 3],
    pub classes: usize,
}

impl GridSpec {
    pub fn channels(&self) -> usize {
        self.anchors[0].len() * (5 + self.classes)
    }

    /// Flat index into a `[B, A*(5+M), H, W]` grid.
    pub fn index(
        &self,
        k: usize,
        image: usize,
        anchor: usize,
        c: usize,
        v: usize,
        u: usize,
    ) -> usize {
        let (h, w) = self.sizes[k];
        let per = 5 + self.classes;
        (((image * self.anchors[k].len() + anchor) * per + c) * h + v) * w + u
    }
}

fn shape_iou(w1: f64, h1: f64, w2: f64, h2: f64) -> f64 {
    let inter = w1.min(w2) * h1.min(h2);
    inter / (w1 * h1 + w2 * h2 - inter)
}

/// True when `a` beats `b` for a shared predictor: larger area, then smaller
/// `(class, cx, cy, w, h)`.
fn wins(a: &Ann, b: &Ann) -> bool {
    let (aa, ba) = (a.3 * a.4, b.3 * b.4);
    if aa != ba {
        return aa > ba;
    }
    let ka = [a.0 as f64, a.1, a.2, a.3, a.4];
    let kb = [b.0 as f64, b.1, b.2, b.3, b.4];
    for (x, y) in ka.iter().zip(&kb) {
        if x != y {
            return x < y;
        }
    }
    false
}

/// Sum-of-squares detection objective, averaged over annotated images.
pub fn detection_loss(
    spec: &GridSpec,
    grids: &[Vec<f64>; 3],
    annotations: &[Option<Vec<Ann>>],
    coord: f64,
    noobj: f64,
    max_log_scale: f64,
) -> f64 {
    // owner[(image, k, a, v, u)] = annotation
    let mut owners: Vec<((usize, usize, usize, usize, usize), Ann)> = Vec::new();
    for (i, anns) in annotations.iter().enumerate() {
        let Some(anns) = anns else { continue };
        for ann in anns {
            let mut best = (0, 0);
            let mut best_iou = -1.0;
            for k in 0..3 {
                for (a, &(aw, ah)) in spec.anchors[k].iter().enumerate() {
                    let s = shape_iou(ann.3, ann.4, aw, ah);
                    if s > best_iou {
                        best_iou = s;
                        best = (k, a);
                    }
                }
            }
            let (k, a) = best;
            let (h, w) = spec.sizes[k];
            let u = ((ann.1 * w as f64).floor() as i64).clamp(0, w as i64 - 1) as usize;
            let v = ((ann.2 * h as f64).floor() as i64).clamp(0, h as i64 - 1) as usize;
            let key = (i, k, a, v, u);
            match owners.iter_mut().find(|(kk, _)| *kk == key) {
                Some(slot) => {
                    if wins(ann, &slot.1) {
                        slot.1 = *ann;
                    }
                }
                None => owners.push((key, *ann)),
            }
        }
    }
    let supervised: Vec<usize> = (0..annotations.len())
        .filter(|&i| annotations[i].is_some())
        .collect();
    if supervised.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &i in &supervised {
        for k in 0..3 {
            let (h, w) = spec.sizes[k];
            for (a, &(aw, ah)) in spec.anchors[k].iter().enumerate() {
                for v in 0..h {
                    for u in 0..w {
                        let at = |c: usize| grids[k][spec.index(k, i, a, c, v, u)];
                        let obj = sigmoid(at(4));
                        match owners.iter().find(|(kk, _)| *kk == (i, k, a, v, u)) {
                            None => total += noobj * obj * obj,
                            Some((_, ann)) => {
                                let x = (ann.1 * w as f64 - u as f64).clamp(0.0, 1.0);
                                let y = (ann.2 * h as f64 - v as f64).clamp(0.0, 1.0);
                                total += coord
                                    * ((sigmoid(at(0)) - x).powi(2) + (sigmoid(at(1)) - y).powi(2));
                                let tw = at(2).clamp(-max_log_scale, max_log_scale);
                                let th = at(3).clamp(-max_log_scale, max_log_scale);
                                let pw = (aw * tw.exp()).sqrt();
                                let ph = (ah * th.exp()).sqrt();
                                total += coord
                                    * ((pw - ann.3.sqrt()).powi(2) + (ph - ann.4.sqrt()).powi(2));
                                total += (obj - 1.0).powi(2);
                                for c in 0..spec.classes {
                                    let want = if c == ann.0 { 1.0 } else { 0.0 };
                                    total += (sigmoid(at(5 + c)) - want).powi(2);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    total / supervised.len() as f64
}

/// Detection as `(image, class, score, box)`; ground truth as `(image, class, box)`.
pub type Det = (usize, usize, f64, Rect);
pub type Gt = (usize, usize, Rect);

/// Per-class AP by enumerating every score threshold: each threshold yields
/// one (recall, precision) point, and AP integrates the best precision
/// reachable at or beyond each recall level. Detections must have distinct
/// scores. Classes without ground truth map to `None`.
pub fn average_precision_oracle(
    dets: &[Det],
    gts: &[Gt],
    classes: usize,
    iou_t: f64,
) -> (Vec<Option<f64>>, f64) {
    let mut out = Vec::new();
    for c in 0..classes {
        let class_gts: Vec<&Gt> = gts.iter().filter(|g| g.1 == c).collect();
        if class_gts.is_empty() {
            out.push(None);
            continue;
        }
        let mut class_dets: Vec<&Det> = dets.iter().filter(|d| d.1 == c).collect();
        class_dets.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
        // Greedy matching in score order.
        let mut used = vec![false; class_gts.len()];
        let mut hit = Vec::new();
        for d in &class_dets {
            let mut best: Option<usize> = None;
            let mut best_iou = iou_t;
            for (j, g) in class_gts.iter().enumerate() {
                if used[j] || g.0 != d.0 {
                    continue;
                }
                let o = iou(d.3, g.2);
                if o > best_iou || (o == best_iou && best.is_none()) {
                    best_iou = o;
                    best = Some(j);
                }
            }
            if let Some(j) = best {
                used[j] = true;
            }
            hit.push(best.is_some());
        }
        // One operating point per threshold.
        let mut points = Vec::new();
        for d in &class_dets {
            let t = d.2;
            let kept: Vec<bool> = class_dets
                .iter()
                .zip(&hit)
                .filter(|(x, _)| x.2 >= t)
                .map(|(_, &h)| h)
                .collect();
            let tp = kept.iter().filter(|&&h| h).count() as f64;
            points.push((tp / class_gts.len() as f64, tp / kept.len() as f64));
        }
        let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels.dedup();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for r in levels {
            let best = points
                .iter()
                .filter(|p| p.0 >= r)
                .map(|p| p.1)
                .fold(0.0, f64::max);
            ap += (r - prev) * best;
            prev = r;
        }
        out.push(Some(ap));
    }
    let present: Vec<f64> = out.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (out, map)
}

pub fn random_rect<R: Rng>(rng: &mut R) -> Rect {
    let w = rng.random_range(0.05..0.5);
    let h = rng.random_range(0.05..0.5);
    [
        rng.random_range(w / 2.0..1.0 - w / 2.0),
        rng.random_range(h / 2.0..1.0 - h / 2.0),
        w,
        h,
    ]
}

/// Copy of `r` shifted by up to `jitter` of its size, to produce partial overlaps.
pub fn jitter_rect<R: Rng>(rng: &mut R, r: Rect, jitter: f64) -> Rect {
    let dx = rng.random_range(-jitter..jitter) * r[2];
    let dy = rng.random_range(-jitter..jitter) * r[3];
    let sw = 1.0 + rng.random_range(-jitter..jitter);
    let sh = 1.0 + rng.random_range(-jitter..jitter);
    [r[0] + dx, r[1] + dy, r[2] * sw, r[3] * sh]
}

// Adapters that evaluate the library on the same plain inputs.

use dayolo::adaptation::{
    mlcr_loss, msia_loss, ria_loss, DomainProbMap, InstanceProbs, ScaleWeights,
};
use dayolo::autograd::Graph;
use dayolo::bbox::BBox;
use dayolo::evaluation::{average_precision, ApTable, GroundTruth, ScoredBox};
use dayolo::model::{detection_loss as graph_detection_loss, Anchors, DetectionGrid, LossWeights};
use dayolo::sample::{BoxAnnotation, DomainLabel};
use dayolo::tensor::Tensor;
use rand::seq::SliceRandom;

pub fn labels_of(labels: &[u8]) -> Vec<DomainLabel> {
    labels
        .iter()
        .map(|&d| DomainLabel::from_value(d).unwrap())
        .collect()
}

/// `maps[i][k]` with per-scale sizes `sizes[k]`; returns one `[B, 1, H_k, W_k]` map per scale.
/// Probability maps on the graph. With `logits` the numbers are pre-sigmoid
/// values and the maps carry them, as the classifier heads do.
pub fn graph_maps(
    g: &mut Graph,
    maps: &[Vec<Vec<f64>>],
    sizes: &[(usize, usize)],
    logits: bool,
) -> Vec<DomainProbMap> {
    sizes
        .iter()
        .enumerate()
        .map(|(k, &(h, w))| {
            let data: Vec<f32> = maps
                .iter()
                .flat_map(|m| m[k].iter().map(|&p| p as f32))
                .collect();
            let input = g.variable(Tensor::new(vec![maps.len(), 1, h, w], data).unwrap());
            if logits {
                let var = g.sigmoid(input);
                DomainProbMap {
                    scale: k,
                    var,
                    logit: Some(input),
                }
            } else {
                DomainProbMap {
                    scale: k,
                    var: input,
                    logit: None,
                }
            }
        })
        .collect()
}

pub fn graph_instances(g: &mut Graph, instances: &[Inst], logits: bool) -> Vec<InstanceProbs> {
    (0..3)
        .map(|k| {
            let mine: Vec<&Inst> = instances.iter().filter(|x| x.1 == k).collect();
            let data: Vec<f32> = mine.iter().map(|x| x.2 as f32).collect();
            let input = g.variable(Tensor::new(vec![mine.len()], data).unwrap());
            let images = mine.iter().map(|x| x.0).collect();
            if logits {
                let var = g.sigmoid(input);
                InstanceProbs {
                    scale: k,
                    var,
                    logit: Some(input),
                    images,
                }
            } else {
                InstanceProbs {
                    scale: k,
                    var: input,
                    logit: None,
                    images,
                }
            }
        })
        .collect()
}

pub fn lib_ria(
    maps: &[Vec<Vec<f64>>],
    sizes: &[(usize, usize)],
    labels: &[u8],
    weights: [f64; 3],
) -> f64 {
    ria_via(maps, sizes, labels, weights, false)
}

pub fn ria_via(
    maps: &[Vec<Vec<f64>>],
    sizes: &[(usize, usize)],
    labels: &[u8],
    weights: [f64; 3],
    logits: bool,
) -> f64 {
    let mut g = Graph::new();
    let pm = graph_maps(&mut g, maps, sizes, logits);
    let l = ria_loss(&mut g, &pm, &labels_of(labels), &ScaleWeights(weights)).unwrap();
    g.value(l).to_scalar().unwrap() as f64
}

pub fn lib_msia(instances: &[Inst], labels: &[u8], weights: [f64; 3]) -> f64 {
    msia_via(instances, labels, weights, false)
}

pub fn msia_via(instances: &[Inst], labels: &[u8], weights: [f64; 3], logits: bool) -> f64 {
    let mut g = Graph::new();
    let ip = graph_instances(&mut g, instances, logits);
    let l = msia_loss(&mut g, &ip, &labels_of(labels), &ScaleWeights(weights)).unwrap();
    g.value(l).to_scalar().unwrap() as f64
}

pub fn lib_mlcr(maps: &[Vec<Vec<f64>>], sizes: &[(usize, usize)], instances: &[Inst]) -> f64 {
    mlcr_via(maps, sizes, instances, false)
}

pub fn mlcr_via(
    maps: &[Vec<Vec<f64>>],
    sizes: &[(usize, usize)],
    instances: &[Inst],
    logits: bool,
) -> f64 {
    let mut g = Graph::new();
    let pm = graph_maps(&mut g, maps, sizes, logits);
    let ip = graph_instances(&mut g, instances, logits);
    let l = mlcr_loss(&mut g, &pm, &ip, maps.len()).unwrap();
    g.value(l).to_scalar().unwrap() as f64
}

pub fn lib_detection_loss(
    spec: &GridSpec,
    grids: &[Vec<f64>; 3],
    annotations: &[Option<Vec<Ann>>],
    coord: f64,
    noobj: f64,
) -> f64 {
    let mut g = Graph::new();
    let b = annotations.len();
    let ch = spec.channels();
    let vars: Vec<DetectionGrid> = (0..3)
        .map(|k| {
            let (h, w) = spec.sizes[k];
            let data = grids[k].iter().map(|&v| v as f32).collect();
            DetectionGrid {
                scale: k,
                var: g.variable(Tensor::new(vec![b, ch, h, w], data).unwrap()),
            }
        })
        .collect();
    let owned: Vec<Option<Vec<BoxAnnotation>>> = annotations
        .iter()
        .map(|a| {
            a.as_ref().map(|v| {
                v.iter()
                    .map(|&(c, x, y, w, h)| BoxAnnotation::new(c, x, y, w, h))
                    .collect()
            })
        })
        .collect();
    let refs: Vec<Option<&[BoxAnnotation]>> = owned.iter().map(|a| a.as_deref()).collect();
    let anchors = Anchors {
        per_scale: spec.anchors.clone(),
    };
    let weights = LossWeights {
        lambda_coord: coord,
        lambda_noobj: noobj,
    };
    let l = graph_detection_loss(
        &mut g,
        &[vars[0], vars[1], vars[2]],
        &refs,
        &anchors,
        spec.classes,
        weights,
    )
    .unwrap();
    g.value(l.total).to_scalar().unwrap() as f64
}

/// Round to the nearest f32 so both sides see identical inputs.
pub fn f32ish(x: f64) -> f64 {
    x as f32 as f64
}

/// Random probability strictly inside (0, 1), occasionally near the edges.
pub fn random_prob<R: Rng>(rng: &mut R) -> f64 {
    f32ish(match rng.random_range(0..10) {
        0 => rng.random_range(1e-6..1e-3),
        1 => 1.0 - rng.random_range(1e-6..1e-3),
        _ => rng.random_range(0.01..0.99),
    })
}

/// The case rewritten in logits: the first value holds f32 logits, the
/// second the exact f64 sigmoids of those logits for the oracle.
pub fn as_logits(c: &AlignCase) -> (AlignCase, AlignCase) {
    let z = |p: f64| f32ish((p / (1.0 - p)).ln());
    let (mut zs, mut ps) = (c.clone(), c.clone());
    for (mz, mp) in zs
        .maps
        .iter_mut()
        .flatten()
        .flatten()
        .zip(ps.maps.iter_mut().flatten().flatten())
    {
        *mz = z(*mz);
        *mp = sigmoid(*mz);
    }
    for (iz, ip) in zs.instances.iter_mut().zip(ps.instances.iter_mut()) {
        iz.2 = z(iz.2);
        ip.2 = sigmoid(iz.2);
    }
    (zs, ps)
}

/// A random alignment instance: batch, per-scale map sizes (each side 1..=4),
/// labels, maps and up to 5 instances.
#[derive(Clone, Debug)]
pub struct AlignCase {
    pub sizes: Vec<(usize, usize)>,
    pub labels: Vec<u8>,
    pub maps: Vec<Vec<Vec<f64>>>,
    pub instances: Vec<Inst>,
    pub weights: [f64; 3],
}

pub fn random_align_case<R: Rng>(rng: &mut R) -> AlignCase {
    let b = rng.random_range(1..=3);
    let sizes: Vec<(usize, usize)> = (0..3)
        .map(|_| (rng.random_range(1..=4), rng.random_range(1..=4)))
        .collect();
    let labels: Vec<u8> = (0..b).map(|_| rng.random_range(0..=1)).collect();
    let maps = (0..b)
        .map(|_| {
            sizes
                .iter()
                .map(|&(h, w)| (0..h * w).map(|_| random_prob(rng)).collect())
                .collect()
        })
        .collect();
    let n = rng.random_range(0..=5);
    let instances = (0..n)
        .map(|_| {
            (
                rng.random_range(0..b),
                rng.random_range(0..3),
                random_prob(rng),
            )
        })
        .collect();
    let weights = [0; 3].map(|_| f32ish(rng.random_range(0.0..2.0)));
    AlignCase {
        sizes,
        labels,
        maps,
        instances,
        weights,
    }
}

/// A random detection instance: grids up to 4x4, at most 5 boxes, at most 3 classes.
pub struct DetCase {
    pub spec: GridSpec,
    pub grids: [Vec<f64>; 3],
    pub annotations: Vec<Option<Vec<Ann>>>,
}

pub fn random_det_case<R: Rng>(rng: &mut R) -> DetCase {
    let classes = rng.random_range(1..=3);
    let a = rng.random_range(1..=3);
    let s = rng.random_range(1..=2usize);
    let sizes = [(2 * s, 2 * s), (s, s), (1, 1)];
    let base: Vec<(f64, f64)> = (0..a)
        .map(|_| {
            (
                f32ish(rng.random_range(0.05..0.2)),
                f32ish(rng.random_range(0.05..0.2)),
            )
        })
        .collect();
    let anchors = [1.0, 2.0, 4.0].map(|f| {
        base.iter()
            .map(|&(w, h)| (w * f, h * f))
            .collect::<Vec<_>>()
    });
    let spec = GridSpec {
        sizes,
        anchors,
        classes,
    };
    let b = rng.random_range(1..=2);
    let grids = [0, 1, 2].map(|k| {
        let (h, w) = spec.sizes[k];
        (0..b * spec.channels() * h * w)
            .map(|_| f32ish(rng.random_range(-3.0..3.0)))
            .collect::<Vec<f64>>()
    });
    let mut left = rng.random_range(0..=5usize);
    let annotations = (0..b)
        .map(|_| {
            if rng.random_bool(0.2) {
                return None;
            }
            let n = rng.random_range(0..=left);
            left -= n;
            Some(
                (0..n)
                    .map(|_| {
                        let r = random_rect(rng).map(f32ish);
                        (rng.random_range(0..classes), r[0], r[1], r[2], r[3])
                    })
                    .collect(),
            )
        })
        .collect();
    DetCase {
        spec,
        grids,
        annotations,
    }
}

pub fn bbox(r: Rect) -> BBox {
    BBox::new(r[0], r[1], r[2], r[3])
}

pub fn names(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("c{c}")).collect()
}

pub fn lib_ap(dets: &[Det], gts: &[Gt], classes: usize) -> ApTable {
    let d: Vec<ScoredBox> = dets
        .iter()
        .map(|&(image, class_id, score, r)| ScoredBox {
            image,
            class_id,
            score,
            bbox: bbox(r),
        })
        .collect();
    let g: Vec<GroundTruth> = gts
        .iter()
        .map(|&(image, class_id, r)| GroundTruth {
            image,
            class_id,
            bbox: bbox(r),
        })
        .collect();
    average_precision(&d, &g, &names(classes), 0.5).unwrap()
}

pub struct ApInstance {
    pub dets: Vec<Det>,
    pub gts: Vec<Gt>,
    pub classes: usize,
}

/// At most ten boxes in total, with distinct scores and many near-duplicates of
/// ground truth so that hits, misses and double detections all occur.
pub fn random_ap_instance<R: Rng>(rng: &mut R) -> ApInstance {
    let classes = rng.random_range(1..=3);
    let images = rng.random_range(1..=3);
    let n_gt = rng.random_range(0..=5);
    let gts: Vec<Gt> = (0..n_gt)
        .map(|_| {
            (
                rng.random_range(0..images),
                rng.random_range(0..classes),
                random_rect(rng),
            )
        })
        .collect();
    let n_det = rng.random_range(0..=10 - n_gt);
    let mut scores: Vec<f64> = (1..=n_det).map(|i| i as f64 / (n_det + 1) as f64).collect();
    scores.shuffle(rng);
    let dets = scores
        .into_iter()
        .map(|score| {
            if !gts.is_empty() && rng.random_bool(0.7) {
                let (image, class, r) = gts[rng.random_range(0..gts.len())];
                let class = if rng.random_bool(0.85) {
                    class
                } else {
                    rng.random_range(0..classes)
                };
                (image, class, score, jitter_rect(rng, r, 0.35))
            } else {
                (
                    rng.random_range(0..images),
                    rng.random_range(0..classes),
                    score,
                    random_rect(rng),
                )
            }
        })
        .collect();
    ApInstance { dets, gts, classes }
}
