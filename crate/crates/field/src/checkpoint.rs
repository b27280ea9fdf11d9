//! `TFCK` parameter files: magic, u16 version, u32 header length, JSON header, f32 payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FieldError, Result};
use crate::model::{parameter_layout, Hyper, Model};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TFCK";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f32 elements from the start of the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub hyper: Hyper,
    pub arrays: Vec<ArrayEntry>,
}

pub fn encode_checkpoint<S: Scalar>(model: &Model<S>) -> Result<Vec<u8>> {
    let mut arrays = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (name, t) in model.params.names().iter().zip(model.params.tensors()) {
        arrays.push(ArrayEntry { name: name.clone(), shape: t.shape.clone(), offset });
        offset += t.len();
    }
    let header = serde_json::to_vec(&Header { hyper: model.hyper.clone(), arrays })?;
    let mut out = Vec::with_capacity(10 + header.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in model.params.tensors() {
        for v in &t.data {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<Model<S>> {
    let bad = |m: &str| FieldError::Checkpoint(m.to_string());
    if bytes.len() < 10 {
        return Err(bad("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(FieldError::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let payload = bytes.get(10 + hlen..).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[10..10 + hlen])?;
    header.hyper.validate()?;
    let layout = parameter_layout(&header.hyper);
    if layout.len() != header.arrays.len() {
        return Err(FieldError::Checkpoint(format!("{} arrays, architecture needs {}", header.arrays.len(), layout.len())));
    }
    let mut params = ParamStore::default();
    for ((name, shape, _), entry) in layout.iter().zip(&header.arrays) {
        if *name != entry.name || *shape != entry.shape {
            return Err(FieldError::Checkpoint(format!("array {} {:?} does not match {name} {shape:?}", entry.name, entry.shape)));
        }
        let n: usize = shape.iter().product();
        let raw = payload
            .get(4 * entry.offset..4 * (entry.offset + n))
            .ok_or_else(|| FieldError::Checkpoint(format!("payload truncated in {name}")))?;
        let data: Vec<S> = raw.chunks_exact(4).map(|c| S::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
        params.insert(name, Tensor::from_vec(shape, data));
    }
    if !params.is_finite() {
        return Err(bad("non-finite parameter"));
    }
    Ok(Model { hyper: header.hyper, params })
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Model<S>> {
    decode_checkpoint(&fs::read(path)?)
}
