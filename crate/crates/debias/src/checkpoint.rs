//! Binary checkpoint format.
//!
//! ```text
//! "DBVQA001"                      8-byte magic
//! u64 little-endian               header length in bytes
//! JSON header                     {name: {shape, dtype: "f32", byte_offset}}
//! f32 little-endian blocks        in header order, offsets relative to here
//! ```
//!
//! The model configuration is not stored; its dimensions are recovered from
//! the tensor shapes.

use std::fs;
use std::path::Path;

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize};
use vqa_debias_core::model::{ModelConfig, ModelParams, ParamId};
use vqa_debias_core::Tensor;

use crate::error::{io_err, Error, Result};
use crate::manifest::write_atomic;

pub const MAGIC: &[u8; 8] = b"DBVQA001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

struct OrderedHeader<'a>(&'a [(&'static str, TensorEntry)]);

impl Serialize for OrderedHeader<'_> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (name, entry) in self.0 {
            m.serialize_entry(name, entry)?;
        }
        m.end()
    }
}

pub fn to_bytes(params: &ModelParams<f32>) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (id, t) in params.iter() {
        entries.push((
            id.name(),
            TensorEntry {
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                byte_offset: offset,
            },
        ));
        offset += (t.len() * 4) as u64;
    }
    let header = serde_json::to_vec(&OrderedHeader(&entries)).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(params))
}

pub fn load(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    from_bytes(&bytes).map_err(|reason| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    })
}

fn infer_config(shape_of: &dyn Fn(ParamId) -> Option<Vec<usize>>) -> std::result::Result<ModelConfig, String> {
    let get = |id: ParamId, rank: usize| -> std::result::Result<Vec<usize>, String> {
        let s = shape_of(id).ok_or_else(|| format!("missing tensor `{}`", id.name()))?;
        if s.len() != rank {
            return Err(format!("tensor `{}` has rank {}, expected {rank}", id.name(), s.len()));
        }
        Ok(s)
    };
    let conv1 = get(ParamId::FConv1Weight, 4)?;
    let conv2 = get(ParamId::FConv2Weight, 4)?;
    let fc = get(ParamId::FFcWeight, 2)?;
    let emb = get(ParamId::REmbedding, 2)?;
    let out = get(ParamId::H1Fc2Weight, 2)?;
    let (c1, c2) = (conv1[0], conv2[0]);
    let flat = fc[1];
    let cells = flat.checked_div(c2).unwrap_or(0);
    let side = (cells as f64).sqrt().round() as usize;
    if c2 == 0 || cells * c2 != flat || side * side != cells {
        return Err(format!(
            "image encoder width {flat} is not {c2} channels on a square grid"
        ));
    }
    Ok(ModelConfig {
        image_size: side * 4,
        embed_dim: emb[1],
        hidden_dim: fc[0],
        conv_channels: [c1, c2],
        answer_count: out[0],
        vocab_size: emb[0],
        ..ModelConfig::default()
    })
}

pub fn from_bytes(bytes: &[u8]) -> std::result::Result<ModelParams<f32>, String> {
    if bytes.len() < 16 {
        return Err(format!("file is {} bytes, shorter than the preamble", bytes.len()));
    }
    if &bytes[..8] != MAGIC {
        return Err("bad magic".into());
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format!("header length {header_len} runs past end of file"))?;
    let header: std::collections::BTreeMap<String, TensorEntry> =
        serde_json::from_slice(&bytes[16..data_start]).map_err(|e| format!("header: {e}"))?;
    let data = &bytes[data_start..];

    let config = infer_config(&|id| header.get(id.name()).map(|e| e.shape.clone()))?;
    let mut named = Vec::with_capacity(header.len());
    let mut expected_len = 0usize;
    for (name, entry) in &header {
        if entry.dtype != "f32" {
            return Err(format!("tensor `{name}` has dtype {}, expected f32", entry.dtype));
        }
        let count: usize = entry.shape.iter().product();
        let start = entry.byte_offset as usize;
        let end = start
            .checked_add(count * 4)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| format!("tensor `{name}` runs past end of file (truncated?)"))?;
        expected_len += count * 4;
        let values = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::from_vec(&entry.shape, values).map_err(|e| e.to_string())?;
        named.push((name.clone(), t));
    }
    if expected_len != data.len() {
        return Err(format!(
            "tensor data is {} bytes, header describes {expected_len}",
            data.len()
        ));
    }
    let params = ModelParams::from_named(&config, named).map_err(|e| e.to_string())?;
    if !params.is_finite() {
        return Err("non-finite parameter values".into());
    }
    Ok(params)
}
