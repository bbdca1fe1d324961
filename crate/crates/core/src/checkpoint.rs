//! Parameter checkpoints.
//!
//! File layout: an 8-byte little-endian header length `n`, then `n` bytes
//! of JSON mapping each tensor name to `{dtype, shape, data_offsets}` plus a
//! `__metadata__` string map, then the concatenated float32 little-endian
//! payloads. This is the safetensors layout. The model configuration is
//! stored as JSON under the `config` metadata key.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_KEY: &str = "format";
pub const FORMAT_VERSION: &str = "vpseg-checkpoint-1";
pub const CONFIG_KEY: &str = "config";

fn ckpt_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

/// Serialize parameters (as float32) and string metadata.
pub fn params_to_bytes(params: &ParamStore, metadata: HashMap<String, String>) -> Result<Vec<u8>> {
    let payloads: Vec<(String, Vec<usize>, Vec<u8>)> = params
        .iter()
        .map(|(name, t)| {
            let bytes = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            (name.clone(), t.shape().to_vec(), bytes)
        })
        .collect();
    let views = payloads
        .iter()
        .map(|(name, shape, bytes)| Ok((name.as_str(), TensorView::new(Dtype::F32, shape.clone(), bytes).map_err(ckpt_err)?)))
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, &Some(metadata)).map_err(ckpt_err)?;
    canonical_header(bytes)
}

/// Rewrite the JSON header with sorted keys. The metadata map is hashed, so
/// without this the same parameters could serialize to different bytes.
fn canonical_header(bytes: Vec<u8>) -> Result<Vec<u8>> {
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte prefix")) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n])?;
    let mut text = serde_json::to_vec(&header)?;
    // same padding rule as the writer: header length a multiple of 8
    text.resize(text.len().div_ceil(8) * 8, b' ');
    let mut out = Vec::with_capacity(8 + text.len() + bytes.len() - 8 - n);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[8 + n..]);
    Ok(out)
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<(ParamStore, HashMap<String, String>)> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(ckpt_err)?;
    let st = SafeTensors::deserialize(bytes).map_err(ckpt_err)?;
    let mut params = ParamStore::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("tensor `{name}` has dtype {:?}, expected F32", view.dtype())));
        }
        let data: Vec<f64> = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        params.insert(name, Tensor::new(view.shape(), data)?);
    }
    Ok((params, meta.metadata().clone().unwrap_or_default()))
}

pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut meta = HashMap::new();
    meta.insert(FORMAT_KEY.to_string(), FORMAT_VERSION.to_string());
    meta.insert(CONFIG_KEY.to_string(), serde_json::to_string(&model.config)?);
    params_to_bytes(&model.params, meta)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let (params, meta) = params_from_bytes(bytes)?;
    match meta.get(FORMAT_KEY) {
        Some(v) if v == FORMAT_VERSION => {}
        other => return Err(Error::Checkpoint(format!("unknown checkpoint format {other:?}"))),
    }
    let cfg = meta
        .get(CONFIG_KEY)
        .ok_or_else(|| Error::Checkpoint("checkpoint has no model config".into()))?;
    let config: ModelConfig = serde_json::from_str(cfg)?;
    Model::from_parts(config, params)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    model_from_bytes(&bytes)
}

/// Parameters rounded through float32, as a saved checkpoint holds them.
pub fn round_to_f32(params: &ParamStore) -> ParamStore {
    let mut out = params.clone();
    for (_, t) in out.iter_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
    out
}
