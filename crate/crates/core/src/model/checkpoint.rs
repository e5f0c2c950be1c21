//! Binary checkpoint container.
//!
//! Layout: the magic bytes `VSFM`, a little-endian `u32` format version, a
//! little-endian `u64` manifest length, the JSON manifest, then every tensor
//! payload as little-endian values in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::datasets::NormStats;
use crate::error::{Error, Result};
use crate::numerics::{DType, Float, Tensor};

pub const MAGIC: &[u8; 4] = b"VSFM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: DType,
    pub config: ModelConfig,
    pub m: usize,
    pub n: usize,
    pub tensors: Vec<TensorEntry>,
    pub norm_stats: Option<NormStats>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn to_bytes<F: Float>(model: &Model<F>) -> Result<Vec<u8>> {
    let manifest = Manifest {
        dtype: F::DTYPE,
        config: model.config,
        m: model.m,
        n: model.n,
        tensors: model
            .store
            .iter()
            .map(|(_, name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        norm_stats: model.norm.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + model.param_count() * F::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in model.store.iter() {
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing VSFM header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("manifest runs past the end of the file"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..end])?;
    Ok((manifest, end))
}

/// Rebuilds a model from checkpoint bytes. Payloads stored at another width
/// are converted.
pub fn from_bytes<F: Float>(bytes: &[u8]) -> Result<Model<F>> {
    let (manifest, mut pos) = read_manifest(bytes)?;
    let mut model = Model::<F>::new(manifest.config, manifest.m, manifest.n, 0)?;
    if manifest.tensors.len() != model.store.len() {
        return Err(corrupt(format!(
            "{} tensors stored, model has {}",
            manifest.tensors.len(),
            model.store.len()
        )));
    }
    let width = match manifest.dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    for entry in &manifest.tensors {
        let id = model
            .store
            .id(&entry.name)
            .ok_or_else(|| corrupt(format!("unknown tensor `{}`", entry.name)))?;
        if model.store.get(id).shape() != entry.shape.as_slice() {
            return Err(corrupt(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                entry.name,
                entry.shape,
                model.store.get(id).shape()
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let end = pos + numel * width;
        if end > bytes.len() {
            return Err(corrupt(format!("payload of `{}` is truncated", entry.name)));
        }
        let data = bytes[pos..end]
            .chunks_exact(width)
            .map(|c| match manifest.dtype {
                DType::F32 => F::from_f64(f32::read_le(c) as f64),
                DType::F64 => F::from_f64(f64::read_le(c)),
            })
            .collect();
        *model.store.get_mut(id) = Tensor::new(entry.shape.clone(), data)?;
        pos = end;
    }
    if pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - pos)));
    }
    model.norm = manifest.norm_stats;
    Ok(model)
}

pub fn save<F: Float>(model: &Model<F>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load<F: Float>(path: &Path) -> Result<Model<F>> {
    from_bytes(&fs::read(path)?)
}
