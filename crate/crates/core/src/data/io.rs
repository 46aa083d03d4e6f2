//! On-disk dataset layout.
//!
//! ```text
//! root/manifest.json
//! root/{source,target}/{train,val}/images/NNNNNN.png
//! root/{source,target}/{train,val}/labels/NNNNNN.json
//! ```
//!
//! Label files hold `{"boxes": [{"class", "cx", "cy", "w", "h"}, ...]}`.
//! The target training split is written without label files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::RgbImage;
use crate::error::{validation_err, Error, Result};
use crate::sample::{BoxAnnotation, DomainLabel, ImageSample};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_TAG: &str = "dayolo-dataset";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    Val,
}

impl SplitRole {
    pub fn name(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::Val => "val",
        }
    }
}

/// A domain and a role, written `source-train`, `target-val`, ...
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SplitId {
    pub domain: DomainLabel,
    pub role: SplitRole,
}

impl SplitId {
    pub fn new(domain: DomainLabel, role: SplitRole) -> Self {
        Self { domain, role }
    }

    pub fn all() -> [SplitId; 4] {
        use DomainLabel::*;
        use SplitRole::*;
        [
            SplitId::new(Source, Train),
            SplitId::new(Target, Train),
            SplitId::new(Source, Val),
            SplitId::new(Target, Val),
        ]
    }

    pub fn name(self) -> String {
        format!("{}-{}", self.domain.name(), self.role.name())
    }

    pub fn parse(s: &str) -> Result<Self> {
        SplitId::all()
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| validation_err!("unknown split `{s}`; expected one of source-train, target-train, source-val, target-val"))
    }

    /// Only the target training split is unlabeled.
    pub fn annotated(self) -> bool {
        !(self.domain == DomainLabel::Target && self.role == SplitRole::Train)
    }

    fn dir(self) -> PathBuf {
        PathBuf::from(self.domain.name()).join(self.role.name())
    }

    pub fn sample_id(self, index: usize) -> String {
        format!("{}-{index:06}", self.name())
    }
}

impl std::fmt::Display for SplitId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

/// Samples of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: SplitId,
    pub class_names: Vec<String>,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest directory.
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub domain: DomainLabel,
    pub role: SplitRole,
    pub annotated: bool,
    /// SHA-256 over the split's files, in entry order.
    pub content_hash: String,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub seed: u64,
    pub spec_hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorInfo>,
    pub splits: BTreeMap<String, SplitEntry>,
}

impl Manifest {
    pub fn new(class_names: Vec<String>) -> Self {
        Self {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            class_names,
            generator: None,
            splits: BTreeMap::new(),
        }
    }

    /// Accepts either the manifest file or its directory.
    pub fn read(path: &Path) -> Result<(Self, PathBuf)> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&file, e))?;
        if manifest.format != FORMAT_TAG || manifest.version != FORMAT_VERSION {
            return Err(Error::format(
                &file,
                format!(
                    "unsupported manifest {} v{}",
                    manifest.format, manifest.version
                ),
            ));
        }
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, root))
    }

    /// Write `root/manifest.json`; returns its path.
    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let file = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&file, text + "\n").map_err(|e| Error::io(&file, e))?;
        Ok(file)
    }

    pub fn split(&self, id: SplitId) -> Result<&SplitEntry> {
        self.splits
            .get(&id.name())
            .ok_or_else(|| validation_err!("manifest has no split `{id}`"))
    }
}

#[derive(Serialize, Deserialize)]
struct LabelFile {
    boxes: Vec<BoxAnnotation>,
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e))?;
    writer
        .write_image_data(&img.data)
        .map_err(|e| Error::format(path, e))?;
    writer.finish().map_err(|e| Error::format(path, e))
}

/// Decode an 8-bit PNG (gray, gray-alpha, RGB or RGBA) into RGB.
pub fn read_png(path: &Path) -> Result<RgbImage> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            path,
            format!("unsupported bit depth {:?}", info.bit_depth),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let mut img = RgbImage::new(w, h);
    for p in 0..w * h {
        let src = &buf[p * channels..(p + 1) * channels];
        let rgb = match channels {
            1 | 2 => [src[0]; 3],
            _ => [src[0], src[1], src[2]],
        };
        img.data[p * 3..p * 3 + 3].copy_from_slice(&rgb);
    }
    Ok(img)
}

/// Write a split's files under `root`; returns its manifest entry.
pub fn save_split(ds: &Dataset, root: &Path) -> Result<SplitEntry> {
    let dir = root.join(ds.split.dir());
    let mut hasher = Sha256::new();
    let mut entries = Vec::with_capacity(ds.len());
    for (i, sample) in ds.samples.iter().enumerate() {
        let image_rel = ds.split.dir().join("images").join(format!("{i:06}.png"));
        let image_path = root.join(&image_rel);
        write_png(&image_path, &RgbImage::from_tensor(&sample.pixels)?)?;
        hasher.update(fs::read(&image_path).map_err(|e| Error::io(&image_path, e))?);

        let labels = if ds.split.annotated() {
            let rel = ds.split.dir().join("labels").join(format!("{i:06}.json"));
            let path = root.join(&rel);
            fs::create_dir_all(dir.join("labels")).map_err(|e| Error::io(dir.join("labels"), e))?;
            let body = serde_json::to_string(&LabelFile {
                boxes: sample.annotations.clone(),
            })
            .expect("labels serialize");
            fs::write(&path, &body).map_err(|e| Error::io(&path, e))?;
            hasher.update(body.as_bytes());
            Some(rel)
        } else {
            None
        };
        entries.push(ManifestEntry {
            id: sample.id.clone(),
            image: image_rel,
            labels,
        });
    }
    Ok(SplitEntry {
        domain: ds.split.domain,
        role: ds.split.role,
        annotated: ds.split.annotated(),
        content_hash: hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect(),
        entries,
    })
}

/// Write several splits and a manifest listing them.
pub fn save_dataset(datasets: &[Dataset], root: &Path) -> Result<PathBuf> {
    let first = datasets
        .first()
        .ok_or_else(|| validation_err!("nothing to save"))?;
    let mut manifest = Manifest::new(first.class_names.clone());
    for ds in datasets {
        if ds.class_names != manifest.class_names {
            return Err(validation_err!(
                "split {} has different class names",
                ds.split
            ));
        }
        manifest
            .splits
            .insert(ds.split.name(), save_split(ds, root)?);
    }
    manifest.write(root)
}

/// Load one split. Boxes are clamped to the unit square; labels of the
/// unannotated split are never read.
pub fn load_dataset(manifest_path: &Path, split: SplitId) -> Result<Dataset> {
    let (manifest, root) = Manifest::read(manifest_path)?;
    let entry = manifest.split(split)?;
    let num_classes = manifest.class_names.len();
    let mut samples = Vec::with_capacity(entry.entries.len());
    for (index, rec) in entry.entries.iter().enumerate() {
        let image_path = root.join(&rec.image);
        let img = read_png(&image_path)?;
        let annotations = match (&rec.labels, split.annotated() && entry.annotated) {
            (Some(rel), true) => {
                let path = root.join(rel);
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let file: LabelFile = serde_json::from_str(&text).map_err(|e| {
                    validation_err!(
                        "{split} record {index} ({}): bad label file: {e}",
                        path.display()
                    )
                })?;
                let mut boxes = Vec::with_capacity(file.boxes.len());
                for (b, ann) in file.boxes.iter().enumerate() {
                    ann.validate(num_classes)
                        .map_err(|e| validation_err!("{split} record {index} box {b}: {e}"))?;
                    boxes.push(ann.clamped());
                }
                boxes
            }
            (None, true) => {
                return Err(validation_err!("{split} record {index} has no label file"));
            }
            (_, false) => Vec::new(),
        };
        let sample = ImageSample::new(rec.id.clone(), split.domain, img.to_tensor(), annotations)
            .map_err(|e| {
            validation_err!("{split} record {index} ({}): {e}", image_path.display())
        })?;
        samples.push(sample);
    }
    Ok(Dataset {
        split,
        class_names: manifest.class_names.clone(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{
        generate_synthetic_domain_pair, CorruptionSpec, SceneSpec, SplitCounts,
    };

    fn counts() -> SplitCounts {
        SplitCounts {
            train_source: 3,
            train_target: 2,
            val_source: 2,
            val_target: 2,
        }
    }

    #[test]
    fn split_names_round_trip() {
        for id in SplitId::all() {
            assert_eq!(SplitId::parse(&id.name()).unwrap(), id);
        }
        assert!(SplitId::parse("target-test").is_err());
        assert!(!SplitId::parse("target-train").unwrap().annotated());
    }

    #[test]
    fn generated_layout_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default();
        let m = generate_synthetic_domain_pair(
            dir.path(),
            &spec,
            &CorruptionSpec::foggy(),
            counts(),
            4,
        )
        .unwrap();
        let (manifest, _) = Manifest::read(&m).unwrap();
        assert_eq!(manifest.splits.len(), 4);
        for entry in manifest.splits.values() {
            for rec in &entry.entries {
                assert!(dir.path().join(&rec.image).is_file());
                if let Some(l) = &rec.labels {
                    assert!(dir.path().join(l).is_file());
                }
            }
        }
        assert!(manifest
            .split(SplitId::parse("target-train").unwrap())
            .unwrap()
            .entries
            .iter()
            .all(|e| e.labels.is_none()));
        assert!(!dir.path().join("target/train/labels").exists());

        let tt = load_dataset(&m, SplitId::parse("target-train").unwrap()).unwrap();
        assert_eq!(tt.len(), 2);
        assert!(tt
            .samples
            .iter()
            .all(|s| s.annotations.is_empty() && s.domain == DomainLabel::Target));
        let sv = load_dataset(&m, SplitId::parse("source-val").unwrap()).unwrap();
        let tv = load_dataset(&m, SplitId::parse("target-val").unwrap()).unwrap();
        for (a, b) in sv.samples.iter().zip(&tv.samples) {
            assert_eq!(a.annotations, b.annotations);
            assert_ne!(a.pixels, b.pixels);
        }
    }

    #[test]
    fn generation_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default();
        let ma =
            generate_synthetic_domain_pair(a.path(), &spec, &CorruptionSpec::foggy(), counts(), 21)
                .unwrap();
        let mb =
            generate_synthetic_domain_pair(b.path(), &spec, &CorruptionSpec::foggy(), counts(), 21)
                .unwrap();
        assert_eq!(fs::read(ma).unwrap(), fs::read(mb).unwrap());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_domain_pair(
            dir.path(),
            &SceneSpec::default(),
            &CorruptionSpec::foggy(),
            counts(),
            2,
        )
        .unwrap();
        let all: Vec<Dataset> = SplitId::all()
            .into_iter()
            .map(|s| load_dataset(&m, s).unwrap())
            .collect();
        let other = tempfile::tempdir().unwrap();
        let m2 = save_dataset(&all, other.path()).unwrap();
        for (s, orig) in SplitId::all().into_iter().zip(&all) {
            assert_eq!(&load_dataset(&m2, s).unwrap(), orig);
        }
    }

    #[test]
    fn missing_image_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_domain_pair(
            dir.path(),
            &SceneSpec::default(),
            &CorruptionSpec::default(),
            counts(),
            2,
        )
        .unwrap();
        let victim = dir.path().join("source/val/images/000001.png");
        fs::remove_file(&victim).unwrap();
        match load_dataset(&m, SplitId::parse("source-val").unwrap()) {
            Err(Error::Io { path, .. }) => assert_eq!(path, victim),
            other => panic!("expected io error, got {other:?}"),
        }
    }

    #[test]
    fn bad_class_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_domain_pair(
            dir.path(),
            &SceneSpec::default(),
            &CorruptionSpec::default(),
            counts(),
            2,
        )
        .unwrap();
        let label = dir.path().join("source/train/labels/000002.json");
        fs::write(
            &label,
            r#"{"boxes":[{"class":7,"cx":0.5,"cy":0.5,"w":0.1,"h":0.1}]}"#,
        )
        .unwrap();
        let err = load_dataset(&m, SplitId::parse("source-train").unwrap()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("record 2"), "{err}");
    }

    #[test]
    fn out_of_bounds_boxes_are_clamped() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_domain_pair(
            dir.path(),
            &SceneSpec::default(),
            &CorruptionSpec::default(),
            counts(),
            2,
        )
        .unwrap();
        let label = dir.path().join("source/train/labels/000000.json");
        fs::write(
            &label,
            r#"{"boxes":[{"class":0,"cx":0.95,"cy":0.5,"w":0.2,"h":0.1}]}"#,
        )
        .unwrap();
        let ds = load_dataset(&m, SplitId::parse("source-train").unwrap()).unwrap();
        let b = ds.samples[0].annotations[0];
        assert!((b.cx + 0.5 * b.w - 1.0).abs() < 1e-12);
        assert!((b.w - 0.15).abs() < 1e-12);
    }
}
