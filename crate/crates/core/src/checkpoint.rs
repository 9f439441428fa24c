//! Checkpoint files.
//!
//! Layout: the magic bytes `DASCKPT1`, the manifest length as a little-endian
//! u64, a UTF-8 JSON manifest, then one contiguous blob of little-endian f64
//! values. The manifest records every tensor's name, shape and element offset
//! into the blob, together with the training config, the model shapes, the
//! entity ids and the step counter. Bias-feature matrices are stored in the
//! blob like parameters, under the `buffer.` namespace.

use std::fs;
use std::io::Write;
use std::path::Path;

use das_numerics::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{DasError, Result};
use crate::trainer::{DasModel, ModelParts, Shapes, TrainConfig};
use crate::types::EntityIndex;

pub const MAGIC: &[u8; 8] = b"DASCKPT1";
const USER_BIAS: &str = "buffer.user_bias";
const AD_BIAS: &str = "buffer.ad_bias";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: TrainConfig,
    pub shapes: Shapes,
    pub with_towers: bool,
    pub step: u64,
    pub user_ids: Vec<String>,
    pub ad_ids: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

/// Serialized bytes of a model; a pure function of the model.
pub fn encode(model: &DasModel) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut push = |name: &str, t: &Tensor| {
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset, len: t.len() });
        offset += t.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in model.store.iter() {
        push(&p.name, &p.value);
    }
    push(USER_BIAS, &model.user_bias);
    push(AD_BIAS, &model.ad_bias);
    let manifest = Manifest {
        config: model.config.clone(),
        shapes: model.shapes,
        with_towers: model.parts.towers.is_some(),
        step: model.step,
        user_ids: model.user_index.ids().to_vec(),
        ad_ids: model.ad_index.ids().to_vec(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

/// Writes through a temporary sibling and renames, so a crash never leaves a
/// half-written checkpoint under the final name.
pub fn save_checkpoint(model: &DasModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or("")));
    let mut f = fs::File::create(&tmp).map_err(|e| DasError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| DasError::io(&tmp, e))?;
    f.sync_all().map_err(|e| DasError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DasError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DasModel> {
    let bytes = fs::read(path).map_err(|e| DasError::io(path, e))?;
    decode(&bytes)
}

/// Loads a checkpoint and rejects it unless it was trained with `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &TrainConfig) -> Result<DasModel> {
    let model = load_checkpoint(path)?;
    if &model.config != expected {
        return Err(DasError::Checkpoint(format!(
            "config echo in {} does not match the requested config",
            path.display()
        )));
    }
    Ok(model)
}

pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let err = |m: &str| DasError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(err("missing DASCKPT1 header"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16usize.saturating_add(n)).ok_or_else(|| err("manifest is truncated"))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| DasError::Checkpoint(format!("corrupt manifest: {e}")))?;
    Ok((manifest, &bytes[16 + n..]))
}

pub fn decode(bytes: &[u8]) -> Result<DasModel> {
    let (m, blob) = read_manifest(bytes)?;
    m.config.validate().map_err(|e| DasError::Checkpoint(format!("config echo: {e}")))?;
    let parts = ModelParts::new(&m.config, m.shapes, m.with_towers)?;
    let mut store = parts.init_store(m.config.seed)?;

    let mut entries: std::collections::BTreeMap<&str, &TensorEntry> = Default::default();
    for e in &m.tensors {
        if entries.insert(&e.name, e).is_some() {
            return Err(DasError::Checkpoint(format!("tensor `{}` listed twice", e.name)));
        }
    }
    let read = |name: &str, expected_shape: &[usize]| -> Result<Tensor> {
        let e =
            entries.get(name).ok_or_else(|| DasError::Checkpoint(format!("tensor `{name}` missing from manifest")))?;
        if e.shape != expected_shape || e.len != expected_shape.iter().product::<usize>() {
            return Err(DasError::Checkpoint(format!(
                "tensor `{name}`: shape {:?} in file, model expects {expected_shape:?}",
                e.shape
            )));
        }
        let start = e.offset * 8;
        let end = start + e.len * 8;
        let raw = blob.get(start..end).ok_or_else(|| {
            DasError::Checkpoint(format!(
                "blob truncated: tensor `{name}` needs bytes {start}..{end}, blob has {}",
                blob.len()
            ))
        })?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Tensor::new(e.shape.clone(), data)?)
    };

    let names: Vec<(String, Vec<usize>)> = store.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
    for (name, shape) in &names {
        store.set_value(name, read(name, shape)?)?;
    }
    let user_bias = read(USER_BIAS, &[m.shapes.n_users, m.shapes.user_bias_dim])?;
    let ad_bias = read(AD_BIAS, &[m.shapes.n_ads, m.shapes.ad_bias_dim])?;
    let expected = names.len() + 2;
    if m.tensors.len() != expected {
        let extra: Vec<&str> = m
            .tensors
            .iter()
            .map(|e| e.name.as_str())
            .filter(|n| !store.contains(n) && *n != USER_BIAS && *n != AD_BIAS)
            .collect();
        return Err(DasError::Checkpoint(format!("unexpected tensors {extra:?}")));
    }
    let total: usize = m.tensors.iter().map(|e| e.len).sum();
    if blob.len() != total * 8 {
        return Err(DasError::Checkpoint(format!("blob holds {} bytes, manifest describes {}", blob.len(), total * 8)));
    }
    if m.user_ids.len() != m.shapes.n_users || m.ad_ids.len() != m.shapes.n_ads {
        return Err(DasError::Checkpoint("entity id lists disagree with shapes".into()));
    }
    Ok(DasModel {
        config: m.config,
        shapes: m.shapes,
        parts,
        store,
        user_index: EntityIndex::new(m.user_ids)?,
        ad_index: EntityIndex::new(m.ad_ids)?,
        user_bias,
        ad_bias,
        step: m.step,
    })
}
