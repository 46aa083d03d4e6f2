//! Checkpoint archive: a safetensors file whose metadata carries a JSON header.
//!
//! Weights live in two sections keyed by name prefix: `detector.` (all that is
//! needed at test time) and `adaptation.` (the domain classifiers).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::adaptation::{AdaptationConfig, ADAPTATION_PREFIX};
use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::model::{Anchors, ModelConfig, DETECTOR_PREFIX};
use crate::tensor::Tensor;

pub const CHECKPOINT_EXTENSION: &str = "safetensors";
const HEADER_KEY: &str = "dayolo";
const FORMAT_TAG: &str = "dayolo-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub step: usize,
    pub anchors: Anchors,
    pub model: ModelConfig,
    pub adaptation: AdaptationConfig,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(
        config_hash: String,
        step: usize,
        model: ModelConfig,
        adaptation: AdaptationConfig,
        class_names: Vec<String>,
        params: ParamStore,
    ) -> Self {
        Self {
            header: CheckpointHeader {
                format: FORMAT_TAG.into(),
                version: 1,
                config_hash,
                step,
                anchors: model.anchors.clone(),
                model,
                adaptation,
                class_names,
            },
            params,
        }
    }

    /// Weights used at test time.
    pub fn detector_params(&self) -> ParamStore {
        self.params.filter_prefix(DETECTOR_PREFIX)
    }

    pub fn adaptation_params(&self) -> ParamStore {
        self.params.filter_prefix(ADAPTATION_PREFIX)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .params
            .iter()
            .map(|(name, t)| {
                let bytes = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.to_string(), t.shape().to_vec(), bytes)
            })
            .collect();
        let mut views = Vec::with_capacity(raw.len());
        for (name, shape, bytes) in &raw {
            let view = TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map_err(|e| Error::format(name, e))?;
            views.push((name.clone(), view));
        }
        let header = serde_json::to_string(&self.header).expect("header serializes");
        let meta = HashMap::from([(HEADER_KEY.to_string(), header)]);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::format("<checkpoint>", e))
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::format(origin, e))?;
        let header_text = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .ok_or_else(|| Error::format(origin, "missing checkpoint header"))?;
        let header: CheckpointHeader =
            serde_json::from_str(header_text).map_err(|e| Error::format(origin, e))?;
        if header.format != FORMAT_TAG {
            return Err(Error::format(
                origin,
                format!("not a checkpoint ({})", header.format),
            ));
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::format(origin, e))?;
        let mut params = ParamStore::new();
        for (name, view) in st.tensors() {
            if !name.starts_with(DETECTOR_PREFIX) && !name.starts_with(ADAPTATION_PREFIX) {
                return Err(Error::format(
                    origin,
                    format!("tensor `{name}` belongs to no section"),
                ));
            }
            if view.dtype() != Dtype::F32 {
                return Err(Error::format(
                    origin,
                    format!("tensor `{name}` is {:?}, expected F32", view.dtype()),
                ));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t =
                Tensor::new(view.shape().to_vec(), data).map_err(|e| Error::format(origin, e))?;
            params.insert(name, t);
        }
        Ok(Self { header, params })
    }

    /// Writes to `path`, adding the `.safetensors` extension when it has none.
    pub fn save(&self, path: &Path) -> Result<PathBuf> {
        let path = if path.extension().is_none() {
            path.with_extension(CHECKPOINT_EXTENSION)
        } else {
            path.to_path_buf()
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&path, self.to_bytes()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Reads `path`, or `path.safetensors` when `path` itself does not exist.
    pub fn load(path: &Path) -> Result<Self> {
        let resolved = if !path.exists() && path.extension().is_none() {
            path.with_extension(CHECKPOINT_EXTENSION)
        } else {
            path.to_path_buf()
        };
        let bytes = std::fs::read(&resolved).map_err(|e| Error::io(&resolved, e))?;
        Self::from_bytes(&bytes, &resolved)
    }
}
