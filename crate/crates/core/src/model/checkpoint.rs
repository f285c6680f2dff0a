//! Binary checkpoint format.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "ARPGCKPT"
//! 8       4     format version (u32 LE, currently 1)
//! 12      8     manifest length M in bytes (u64 LE)
//! 20      M     manifest, UTF-8 JSON (see `Manifest`)
//! 20+M    ...   payload: tensors back to back as little-endian scalars
//! ```
//!
//! Each manifest entry records a tensor's name, shape, and byte offset and
//! length relative to the payload start. Model parameters come first in
//! declaration order; optimizer moments follow with an `optim.` prefix.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArpgModel, ModelConfig};
use crate::error::{ArpgError, Result};
use crate::numcore::{Parameter, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"ARPGCKPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form run metadata (training step, seeds, hyperparameters).
    pub meta: serde_json::Value,
}

/// In-memory checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<T>)>,
    pub meta: serde_json::Value,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &ArpgModel<T>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            tensors: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the model from the non-optimizer tensors.
    pub fn model(&self) -> Result<ArpgModel<T>> {
        let params = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("optim."))
            .map(|(n, t)| Parameter::new(n.clone(), t.clone()))
            .collect();
        ArpgModel::from_parameters(&self.config, params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = payload.len();
            for &x in t.data() {
                x.write_le(&mut payload);
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                bytes: payload.len() - offset,
            });
        }
        let manifest = Manifest {
            dtype: T::DTYPE.to_string(),
            config: self.config.clone(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest)
            .map_err(|e| ArpgError::Contract(format!("manifest serialization: {e}")))?;
        let mut out = Vec::with_capacity(HEADER + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |detail: String| ArpgError::format(origin, detail);
        if bytes.len() < HEADER || &bytes[..8] != MAGIC {
            return Err(bad("not an ARPG checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let m = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(HEADER..HEADER.saturating_add(m))
            .ok_or_else(|| bad("truncated manifest".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.dtype != T::DTYPE {
            return Err(bad(format!(
                "checkpoint holds {} scalars, {} requested",
                manifest.dtype,
                T::DTYPE
            )));
        }
        let payload = &bytes[HEADER + m..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.bytes != n * T::BYTES {
                return Err(bad(format!("tensor {} size disagrees with its shape", e.name)));
            }
            let raw = payload
                .get(e.offset..e.offset + e.bytes)
                .ok_or_else(|| bad(format!("tensor {} runs past end of file", e.name)))?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        manifest.config.validate()?;
        Ok(Checkpoint {
            config: manifest.config,
            tensors,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| ArpgError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| ArpgError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

impl<T: Scalar> ArpgModel<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::from_model(self).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::load(path)?.model()
    }
}
