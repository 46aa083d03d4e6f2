//! Synthetic two-domain detection benchmark.
//!
//! Source images are clean renderings of simple shapes on textured
//! backgrounds. Target images are the same kind of scene passed through a
//! corruption pipeline (blur, color cast, depth-graded fog, sensor noise).
//! Validation scenes are shared: target-val image `i` is source-val image `i`
//! after corruption.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::io::{save_split, Dataset, GeneratorInfo, Manifest, SplitId, SplitRole};
use crate::error::{validation_err, Result};
use crate::sample::{BoxAnnotation, DomainLabel, ImageSample};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub image_size: usize,
    /// One name per class; rendering supports `disc`, `square` and `triangle`.
    pub class_names: Vec<String>,
    /// Inclusive object-count range per image.
    pub objects_per_image: (usize, usize),
    /// Object side length as a fraction of the image side.
    pub object_scale: (f64, f64),
    /// Background colors (RGB) used for gradients and clutter.
    pub background_palette: Vec<[u8; 3]>,
    /// Expected number of clutter strokes per image.
    pub clutter_density: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            class_names: vec!["disc".into(), "square".into(), "triangle".into()],
            objects_per_image: (1, 4),
            object_scale: (0.1, 0.4),
            background_palette: vec![
                [70, 74, 80],
                [110, 100, 90],
                [60, 90, 70],
                [140, 140, 130],
                [90, 80, 110],
                [40, 50, 60],
            ],
            clutter_density: 6.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Triangle,
}

impl Shape {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "disc" => Ok(Shape::Disc),
            "square" => Ok(Shape::Square),
            "triangle" => Ok(Shape::Triangle),
            other => Err(validation_err!("unsupported shape class `{other}`")),
        }
    }
}

/// Base object color per class index; each object jitters around it.
const CLASS_COLORS: [[f64; 3]; 3] = [[0.85, 0.25, 0.2], [0.25, 0.75, 0.3], [0.3, 0.4, 0.9]];

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(validation_err!(
                "image_size {} is not a positive multiple of 32",
                self.image_size
            ));
        }
        if self.class_names.is_empty() || self.class_names.len() > CLASS_COLORS.len() {
            return Err(validation_err!("between 1 and 3 classes are supported"));
        }
        for name in &self.class_names {
            Shape::from_name(name)?;
        }
        let (lo, hi) = self.objects_per_image;
        if lo > hi {
            return Err(validation_err!(
                "objects_per_image range ({lo}, {hi}) is empty"
            ));
        }
        let (smin, smax) = self.object_scale;
        if !(smin > 0.0 && smin <= smax && smax < 1.0) {
            return Err(validation_err!(
                "object_scale ({smin}, {smax}) must satisfy 0 < min <= max < 1"
            ));
        }
        if self.background_palette.len() < 2 {
            return Err(validation_err!(
                "background palette needs at least two colors"
            ));
        }
        if !(self.clutter_density >= 0.0) {
            return Err(validation_err!("clutter density must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSpec {
    /// Fog blend `beta`: `t = beta * (0.3 + 0.7 * y / H)`, `pixel' = (1 - t) * pixel + t`.
    pub fog_strength: f64,
    /// Box-blur radius in pixels.
    pub blur_radius: usize,
    pub color_gain: [f64; 3],
    pub color_bias: [f64; 3],
    pub noise_sigma: f64,
}

impl Default for CorruptionSpec {
    /// The identity corruption.
    fn default() -> Self {
        Self {
            fog_strength: 0.0,
            blur_radius: 0,
            color_gain: [1.0; 3],
            color_bias: [0.0; 3],
            noise_sigma: 0.0,
        }
    }
}

impl CorruptionSpec {
    /// The clear-to-foggy shift used by the benchmark.
    pub fn foggy() -> Self {
        Self {
            fog_strength: 0.6,
            blur_radius: 1,
            color_gain: [0.9, 0.95, 1.0],
            color_bias: [0.0, 0.02, 0.05],
            noise_sigma: 0.03,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fog_strength >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(validation_err!("fog strength and noise sigma must be >= 0"));
        }
        if self
            .color_gain
            .iter()
            .chain(&self.color_bias)
            .any(|v| !v.is_finite())
        {
            return Err(validation_err!("color shift must be finite"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train_source: usize,
    pub train_target: usize,
    pub val_source: usize,
    pub val_target: usize,
}

impl SplitCounts {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.train_source,
            self.train_target,
            self.val_source,
            self.val_target,
        ];
        if all.contains(&0) {
            return Err(validation_err!(
                "every split needs at least one image, got {all:?}"
            ));
        }
        Ok(())
    }
}

/// One placed object of a rendered scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlacedObject {
    pub class_id: usize,
    pub annotation: BoxAnnotation,
    pub color: [u8; 3],
}

/// An 8-bit RGB image, row-major `H x W x 3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// `[3, H, W]` array with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut out = vec![0.0f32; 3 * plane];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c] as f32 / 255.0;
            }
        }
        Tensor::new(vec![3, self.height, self.width], out).expect("consistent size")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(validation_err!("expected 3 channels, got {c}"));
        }
        let plane = h * w;
        let mut img = RgbImage::new(w, h);
        for p in 0..plane {
            for ch in 0..3 {
                img.data[p * 3 + ch] = quantize(t.data()[ch * plane + p] as f64);
            }
        }
        Ok(img)
    }

    /// Luminance standard deviation (Rec. 601 weights) over the whole image.
    pub fn luminance_std(&self) -> f64 {
        std_dev(&self.luminance())
    }

    /// Mean over rows of the per-row luminance standard deviation. Fog is
    /// constant along a row, so this isolates scene contrast from the fog's
    /// own vertical gradient.
    pub fn row_contrast(&self) -> f64 {
        let lum = self.luminance();
        lum.chunks_exact(self.width).map(std_dev).sum::<f64>() / self.height as f64
    }

    fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
            .collect()
    }
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Deterministic per-item seed derived from the run seed, a stream tag and an index.
pub fn child_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.to_le_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn lerp(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    let f = |i: usize| quantize(((1.0 - t) * a[i] as f64 + t * b[i] as f64) / 255.0);
    [f(0), f(1), f(2)]
}

fn inside(shape: Shape, px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> bool {
    match shape {
        Shape::Square => px >= x0 && px <= x1 && py >= y0 && py <= y1,
        Shape::Disc => {
            let (cx, cy) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
            let (rx, ry) = (0.5 * (x1 - x0), 0.5 * (y1 - y0));
            let (dx, dy) = ((px - cx) / rx, (py - cy) / ry);
            dx * dx + dy * dy <= 1.0
        }
        Shape::Triangle => {
            if py < y0 || py > y1 {
                return false;
            }
            // Apex at top center, base along the bottom edge.
            let t = (py - y0) / (y1 - y0);
            let half = 0.5 * (x1 - x0) * t;
            let cx = 0.5 * (x0 + x1);
            px >= cx - half && px <= cx + half
        }
    }
}

/// Pixels whose centers fall inside the shape spanning the given pixel-space box.
pub fn shape_mask(shape: Shape, size: usize, bbox: &BoxAnnotation) -> Vec<bool> {
    let s = size as f64;
    let (x0, y0) = ((bbox.cx - 0.5 * bbox.w) * s, (bbox.cy - 0.5 * bbox.h) * s);
    let (x1, y1) = ((bbox.cx + 0.5 * bbox.w) * s, (bbox.cy + 0.5 * bbox.h) * s);
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            mask[y * size + x] = inside(shape, x as f64 + 0.5, y as f64 + 0.5, x0, y0, x1, y1);
        }
    }
    mask
}

/// Render one clean scene.
pub fn render_scene(spec: &SceneSpec, seed: u64) -> Result<(RgbImage, Vec<PlacedObject>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.image_size;
    let s = n as f64;
    let mut img = RgbImage::new(n, n);

    let pal = &spec.background_palette;
    let top = pal[rng.random_range(0..pal.len())];
    let bottom = pal[rng.random_range(0..pal.len())];
    for y in 0..n {
        let c = lerp(top, bottom, y as f64 / (n - 1).max(1) as f64);
        for x in 0..n {
            img.set(x, y, c);
        }
    }

    // Clutter: short thin strokes in palette colors.
    let strokes = if spec.clutter_density > 0.0 {
        let lo = spec.clutter_density.floor() as usize;
        lo + usize::from(rng.random_bool(spec.clutter_density - lo as f64))
    } else {
        0
    };
    for _ in 0..strokes {
        let c = pal[rng.random_range(0..pal.len())];
        let c = lerp(c, [200, 200, 200], rng.random_range(0.0..0.4));
        let (x, y) = (rng.random_range(0..n), rng.random_range(0..n));
        let len = rng.random_range(3..(n / 6).max(4));
        let horizontal = rng.random_bool(0.5);
        for i in 0..len {
            let (px, py) = if horizontal { (x + i, y) } else { (x, y + i) };
            if px < n && py < n {
                img.set(px, py, c);
            }
        }
    }

    let (lo, hi) = spec.objects_per_image;
    let target = rng.random_range(lo..=hi);
    let mut objects: Vec<PlacedObject> = Vec::new();
    let mut attempts = 0;
    while objects.len() < target && attempts < 100 {
        attempts += 1;
        let class_id = rng.random_range(0..spec.class_names.len());
        let side = rng.random_range(spec.object_scale.0..=spec.object_scale.1) * s;
        let aspect: f64 = rng.random_range(0.8..1.25);
        let (w, h) = (
            (side * aspect.sqrt()).round().max(3.0),
            (side / aspect.sqrt()).round().max(3.0),
        );
        if w >= s - 2.0 || h >= s - 2.0 {
            continue;
        }
        let x0 = rng.random_range(1.0..(s - w - 1.0)).round();
        let y0 = rng.random_range(1.0..(s - h - 1.0)).round();
        let ann = BoxAnnotation::new(
            class_id,
            (x0 + 0.5 * w) / s,
            (y0 + 0.5 * h) / s,
            w / s,
            h / s,
        );
        // Keep a one-pixel gap between objects.
        let padded = BoxAnnotation {
            w: ann.w + 2.0 / s,
            h: ann.h + 2.0 / s,
            ..ann
        };
        if objects
            .iter()
            .any(|o| o.annotation.bbox().intersection(&padded.bbox()) > 0.0)
        {
            continue;
        }
        let base = CLASS_COLORS[class_id];
        let jitter = |v: f64, r: &mut ChaCha8Rng| quantize(v + r.random_range(-0.08..0.08));
        let color = [
            jitter(base[0], &mut rng),
            jitter(base[1], &mut rng),
            jitter(base[2], &mut rng),
        ];
        objects.push(PlacedObject {
            class_id,
            annotation: ann,
            color,
        });
    }
    for obj in &objects {
        let shape = Shape::from_name(&spec.class_names[obj.class_id])?;
        let mask = shape_mask(shape, n, &obj.annotation);
        for (i, &m) in mask.iter().enumerate() {
            if m {
                img.set(i % n, i / n, obj.color);
            }
        }
    }
    Ok((img, objects))
}

fn box_blur(img: &RgbImage, radius: usize) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let src: Vec<f64> = img.data.iter().map(|&v| v as f64 / 255.0).collect();
    if radius == 0 {
        return src;
    }
    let r = radius as isize;
    let pass = |input: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; input.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for d in -r..=r {
                        let (sx, sy) = if horizontal {
                            ((x as isize + d).clamp(0, w as isize - 1) as usize, y)
                        } else {
                            (x, (y as isize + d).clamp(0, h as isize - 1) as usize)
                        };
                        acc += input[(sy * w + sx) * 3 + c];
                    }
                    out[(y * w + x) * 3 + c] = acc / (2 * radius + 1) as f64;
                }
            }
        }
        out
    };
    let tmp = pass(&src, true);
    pass(&tmp, false)
}

/// Apply blur, color cast, fog and noise (in that order).
pub fn corrupt(img: &RgbImage, spec: &CorruptionSpec, seed: u64) -> Result<RgbImage> {
    spec.validate()?;
    let mut v = box_blur(img, spec.blur_radius);
    let (w, h) = (img.width, img.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise =
        (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("finite sigma"));
    for y in 0..h {
        let t = (spec.fog_strength * (0.3 + 0.7 * y as f64 / h as f64)).min(1.0);
        for x in 0..w {
            for c in 0..3 {
                let i = (y * w + x) * 3 + c;
                let mut p = v[i] * spec.color_gain[c] + spec.color_bias[c];
                p = (1.0 - t) * p + t;
                if let Some(n) = &noise {
                    p += n.sample(&mut rng);
                }
                v[i] = p;
            }
        }
    }
    Ok(RgbImage {
        width: w,
        height: h,
        data: v.into_iter().map(quantize).collect(),
    })
}

fn spec_hash(scene: &SceneSpec, corruption: &CorruptionSpec, counts: &SplitCounts) -> String {
    let doc = serde_json::json!({ "scene": scene, "corruption": corruption, "counts": counts });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

const STREAM_SOURCE_TRAIN: u64 = 0;
const STREAM_TARGET_TRAIN: u64 = 1;
const STREAM_VAL: u64 = 2;
const STREAM_NOISE_TRAIN: u64 = 3;
const STREAM_NOISE_VAL: u64 = 4;

fn make_sample(
    split: SplitId,
    index: usize,
    img: &RgbImage,
    objects: &[PlacedObject],
) -> Result<ImageSample> {
    let annotations = match split.role {
        SplitRole::Train if split.domain == DomainLabel::Target => Vec::new(),
        _ => objects.iter().map(|o| o.annotation).collect(),
    };
    ImageSample::new(
        split.sample_id(index),
        split.domain,
        img.to_tensor(),
        annotations,
    )
}

/// The four splits, in memory.
pub fn generate_splits(
    scene: &SceneSpec,
    corruption: &CorruptionSpec,
    counts: SplitCounts,
    seed: u64,
) -> Result<Vec<Dataset>> {
    scene.validate()?;
    corruption.validate()?;
    counts.validate()?;
    let classes = scene.class_names.clone();
    let dataset = |split, samples| Dataset {
        split,
        class_names: classes.clone(),
        samples,
    };

    let mut source_train = Vec::with_capacity(counts.train_source);
    let split = SplitId::new(DomainLabel::Source, SplitRole::Train);
    for i in 0..counts.train_source {
        let (img, objs) = render_scene(scene, child_seed(seed, STREAM_SOURCE_TRAIN, i as u64))?;
        source_train.push(make_sample(split, i, &img, &objs)?);
    }

    let mut target_train = Vec::with_capacity(counts.train_target);
    let split = SplitId::new(DomainLabel::Target, SplitRole::Train);
    for i in 0..counts.train_target {
        let (img, objs) = render_scene(scene, child_seed(seed, STREAM_TARGET_TRAIN, i as u64))?;
        let img = corrupt(
            &img,
            corruption,
            child_seed(seed, STREAM_NOISE_TRAIN, i as u64),
        )?;
        target_train.push(make_sample(split, i, &img, &objs)?);
    }

    let mut source_val = Vec::with_capacity(counts.val_source);
    let mut target_val = Vec::with_capacity(counts.val_target);
    let sv = SplitId::new(DomainLabel::Source, SplitRole::Val);
    let tv = SplitId::new(DomainLabel::Target, SplitRole::Val);
    for i in 0..counts.val_source.max(counts.val_target) {
        let (img, objs) = render_scene(scene, child_seed(seed, STREAM_VAL, i as u64))?;
        if i < counts.val_source {
            source_val.push(make_sample(sv, i, &img, &objs)?);
        }
        if i < counts.val_target {
            let img = corrupt(
                &img,
                corruption,
                child_seed(seed, STREAM_NOISE_VAL, i as u64),
            )?;
            target_val.push(make_sample(tv, i, &img, &objs)?);
        }
    }
    Ok(vec![
        dataset(
            SplitId::new(DomainLabel::Source, SplitRole::Train),
            source_train,
        ),
        dataset(
            SplitId::new(DomainLabel::Target, SplitRole::Train),
            target_train,
        ),
        dataset(sv, source_val),
        dataset(tv, target_val),
    ])
}

/// Render the benchmark and write it under `root`; returns the manifest path.
pub fn generate_synthetic_domain_pair(
    root: &Path,
    scene: &SceneSpec,
    corruption: &CorruptionSpec,
    counts: SplitCounts,
    seed: u64,
) -> Result<PathBuf> {
    let splits = generate_splits(scene, corruption, counts, seed)?;
    let mut manifest = Manifest::new(scene.class_names.clone());
    manifest.generator = Some(GeneratorInfo {
        seed,
        spec_hash: spec_hash(scene, corruption, &counts),
    });
    for ds in &splits {
        let entry = save_split(ds, root)?;
        manifest.splits.insert(ds.split.name(), entry);
    }
    manifest.write(root)
}
