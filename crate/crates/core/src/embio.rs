//! Binary embedding tables.
//!
//! Layout: the magic bytes `DASE`, then `count` and `dim` as little-endian
//! u32, then `count × dim` little-endian f32 values in row-major order. Entity
//! ids live in a sidecar text file next to the table (same path with the
//! extension `ids`), one id per line in row order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use das_numerics::Tensor;

use crate::error::{DasError, Result};
use crate::types::EntityIndex;

pub const MAGIC: &[u8; 4] = b"DASE";

/// Embedding rows with their entity ids. Values are held as f64 but are
/// always f32-representable, so a write/read cycle is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub index: EntityIndex,
    pub vectors: Tensor,
}

impl EmbeddingTable {
    pub fn new(ids: Vec<String>, vectors: Tensor) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() != ids.len() {
            return Err(DasError::Invalid(format!(
                "embedding table: {} ids for tensor of shape {:?}",
                ids.len(),
                vectors.shape()
            )));
        }
        if !vectors.is_finite() {
            return Err(DasError::Invalid("embedding table has non-finite values".into()));
        }
        Ok(Self { index: EntityIndex::new(ids)?, vectors })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.index(id).map(|i| self.vectors.row(i))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("ids")
}

pub fn write_embeddings(path: &Path, table: &EmbeddingTable) -> Result<()> {
    let (count, dim) = (table.len(), table.dim());
    let mut buf = Vec::with_capacity(12 + count * dim * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for &v in table.vectors.data() {
        let f = v as f32;
        if f as f64 != v {
            return Err(DasError::Invalid(format!("embedding value {v} is not representable as f32")));
        }
        buf.extend_from_slice(&f.to_le_bytes());
    }
    fs::write(path, &buf).map_err(|e| DasError::io(path, e))?;
    let side = sidecar_path(path);
    let mut ids = fs::File::create(&side).map_err(|e| DasError::io(&side, e))?;
    for id in table.index.ids() {
        if id.contains('\n') {
            return Err(DasError::Invalid(format!("entity id {id:?} contains a newline")));
        }
        writeln!(ids, "{id}").map_err(|e| DasError::io(&side, e))?;
    }
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let bytes = fs::read(path).map_err(|e| DasError::io(path, e))?;
    let bad = |msg: String| DasError::Invalid(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing DASE header".into()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + count * dim * 4;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes for {count}×{dim}, found {}", bytes.len())));
    }
    if count == 0 || dim == 0 {
        return Err(bad("empty table".into()));
    }
    let data: Vec<f64> =
        bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| DasError::io(&side, e))?;
    let ids: Vec<String> = text.lines().map(str::to_string).collect();
    if ids.len() != count {
        return Err(bad(format!("sidecar lists {} ids for {count} rows", ids.len())));
    }
    EmbeddingTable::new(ids, Tensor::new(vec![count, dim], data)?)
}

/// Rounds every value to the nearest f32.
pub fn round_to_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}
