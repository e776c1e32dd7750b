//! Binary checkpoint: `LQTF1`, a little-endian `u32` manifest length, the
//! JSON manifest, then every parameter as little-endian `f64` in manifest
//! order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::Model;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"LQTF1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub parameters: Vec<ParamEntry>,
}

pub fn checkpoint_bytes<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut parameters = Vec::new();
    let mut offset = 0;
    for (_, name, p) in model.params().iter() {
        parameters.push(ParamEntry { name: name.to_string(), shape: p.value.shape().to_vec(), offset });
        offset += 8 * p.value.len();
    }
    let manifest = serde_json::to_vec(&Manifest { format_version: FORMAT_VERSION, config: model.config().clone(), parameters })?;
    let len = u32::try_from(manifest.len()).map_err(|_| Error::Checkpoint("manifest too large".into()))?;
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 4 + manifest.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, _, p) in model.params().iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let head = CHECKPOINT_MAGIC.len();
    if bytes.len() < head + 4 || &bytes[..head] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing LQTF1 magic".into()));
    }
    let len = u32::from_le_bytes(bytes[head..head + 4].try_into().expect("4 bytes")) as usize;
    let start = head + 4;
    let manifest_bytes = bytes.get(start..start + len).ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(manifest_bytes)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
    }
    Ok((manifest, &bytes[start + len..]))
}

pub fn model_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let (manifest, data) = read_manifest(bytes)?;
    let mut values = Vec::with_capacity(manifest.parameters.len());
    let mut expected = 0;
    for e in &manifest.parameters {
        if e.offset != expected {
            return Err(Error::Checkpoint(format!("`{}` at offset {}, expected {expected}", e.name, e.offset)));
        }
        let n: usize = e.shape.iter().product();
        let raw = data.get(e.offset..e.offset + 8 * n).ok_or_else(|| Error::Checkpoint(format!("truncated data for `{}`", e.name)))?;
        let vals = raw.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes")))).collect();
        values.push((e.name.clone(), Tensor::new(e.shape.clone(), vals)?));
        expected += 8 * n;
    }
    if data.len() != expected {
        return Err(Error::Checkpoint(format!("{} trailing bytes", data.len() - expected)));
    }
    let mut model = Model::init(&manifest.config)?;
    model.load_values(values)?;
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    model_from_bytes(&std::fs::read(path)?)
}
