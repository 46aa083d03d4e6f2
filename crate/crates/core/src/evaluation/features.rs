//! Spatially averaged backbone features, one record per image and scale.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore};
use crate::error::{validation_err, Error, Result};
use crate::model::{Detector, NUM_SCALES};
use crate::sample::{DomainLabel, ImageSample};

use super::run::{stack_pixels, INFERENCE_BATCH};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub domain: DomainLabel,
    pub scale: usize,
    pub vector: Vec<f32>,
}

/// Records ordered by sample, then scale.
pub fn extract_features(
    detector: &Detector,
    params: &ParamStore,
    samples: &[&ImageSample],
) -> Result<Vec<FeatureRecord>> {
    let mut out = Vec::with_capacity(samples.len() * NUM_SCALES);
    for chunk in samples.chunks(INFERENCE_BATCH) {
        let mut g = Graph::inference();
        let x = g.constant(stack_pixels(chunk)?);
        let maps = detector.backbone_forward(&mut g, params, x)?;
        for (i, sample) in chunk.iter().enumerate() {
            for map in &maps {
                let (_, c, h, w) = g.value(map.var).dims4()?;
                let data = g.value(map.var).data();
                let vector = (0..c)
                    .map(|ch| {
                        let start = (i * c + ch) * h * w;
                        let s: f64 = data[start..start + h * w].iter().map(|&v| v as f64).sum();
                        (s / (h * w) as f64) as f32
                    })
                    .collect();
                out.push(FeatureRecord {
                    id: sample.id.clone(),
                    domain: sample.domain,
                    scale: map.scale,
                    vector,
                });
            }
        }
    }
    Ok(out)
}

/// CSV with header `id,domain,scale,v0,..,v{C-1}`; `C` is the widest record and
/// narrower rows leave the trailing cells empty.
pub fn write_features_csv(records: &[FeatureRecord], path: &Path) -> Result<()> {
    let width = records.iter().map(|r| r.vector.len()).max().unwrap_or(0);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["id".to_string(), "domain".into(), "scale".into()];
    header.extend((0..width).map(|i| format!("v{i}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in records {
        let mut row = vec![
            r.id.clone(),
            r.domain.value().to_string(),
            r.scale.to_string(),
        ];
        row.extend(r.vector.iter().map(|v| v.to_string()));
        row.resize(3 + width, String::new());
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features_csv(path: &Path) -> Result<Vec<FeatureRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (line, row) in r.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let bad = |what: &str| Error::format(path, format!("row {line}: bad {what}"));
        let id = row.get(0).ok_or_else(|| bad("id"))?.to_string();
        let domain: u8 = row
            .get(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("domain"))?;
        let domain = DomainLabel::from_value(domain).map_err(|_| bad("domain"))?;
        let scale: usize = row
            .get(2)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("scale"))?;
        let vector = row
            .iter()
            .skip(3)
            .take_while(|v| !v.is_empty())
            .map(|v| v.parse::<f32>().map_err(|_| bad("value")))
            .collect::<Result<Vec<f32>>>()?;
        out.push(FeatureRecord {
            id,
            domain,
            scale,
            vector,
        });
    }
    if out.iter().any(|r| r.scale >= NUM_SCALES) {
        return Err(validation_err!(
            "{}: scale index out of range",
            path.display()
        ));
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::format(path, format!("{other:?}")),
        }
    } else {
        Error::format(path, e)
    }
}
