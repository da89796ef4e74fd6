use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use super::{BackendKind, EncoderBackend};
use crate::embedding::{l2_normalize, FeatureVec};
use crate::error::{ensure_dim, Error, Result};
use crate::image::ImagePatch;

/// Embeddings computed offline by an external model and looked up by text
/// or by image digest (16 lowercase hex digits).
///
/// File format: `{ "dim": q, "text": { "<text>": [..] }, "image": { "<digest>": [..] } }`.
#[derive(Debug, Clone)]
pub struct TableBackend {
    dim: usize,
    text: BTreeMap<String, FeatureVec>,
    image: BTreeMap<String, FeatureVec>,
}

#[derive(Deserialize)]
struct TableFile {
    dim: usize,
    #[serde(default)]
    text: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    image: BTreeMap<String, Vec<f64>>,
}

impl TableBackend {
    pub fn new(
        dim: usize,
        text: BTreeMap<String, Vec<f64>>,
        image: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self> {
        let norm_all = |m: BTreeMap<String, Vec<f64>>| -> Result<BTreeMap<String, FeatureVec>> {
            m.into_iter()
                .map(|(k, v)| {
                    ensure_dim(dim, v.len())?;
                    Ok((k, l2_normalize(&v)?))
                })
                .collect()
        };
        Ok(Self {
            dim,
            text: norm_all(text)?,
            image: norm_all(image)?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: TableFile = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::new(f.dim, f.text, f.image)
    }
}

impl EncoderBackend for TableBackend {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn kind(&self) -> BackendKind {
        BackendKind::External
    }

    fn encode_text(&self, text: &str) -> Result<FeatureVec> {
        let key = text.trim();
        if key.is_empty() {
            return Err(Error::Empty("text to encode"));
        }
        self.text
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no external embedding for text {key:?}")))
    }

    fn encode_image(&self, patch: &ImagePatch) -> Result<FeatureVec> {
        let key = format!("{:016x}", patch.digest());
        self.image
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no external embedding for image {key}")))
    }
}
