//! Binary embedding sidecar.
//!
//! Layout: `b"ISEB"`, format version (`u32` LE), header length (`u64` LE), a
//! JSON header mapping each embedding reference to `{offset, dim}`, then the
//! raw `f32` LE vectors. Offsets are in bytes from the start of the vector
//! section.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::StoreError;

pub const MAGIC: &[u8; 4] = b"ISEB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub offset: u64,
    pub dim: u32,
}

/// Embedding reference string for `(task, step, field, variant)`.
pub fn emb_ref(task_id: &str, step_index: u32, field: &str, variant: Option<usize>) -> String {
    match variant {
        None => format!("{task_id}/{step_index}/{field}/base"),
        Some(k) => format!("{task_id}/{step_index}/{field}/v{k}"),
    }
}

/// Reference of variant `k` that belongs to a base reference.
pub fn variant_ref(base_ref: &str, k: usize) -> Option<String> {
    base_ref.strip_suffix("/base").map(|stem| format!("{stem}/v{k}"))
}

/// In-memory table of vectors keyed by reference.
#[derive(Debug, Clone, Default)]
pub struct Sidecar {
    index: BTreeMap<String, (usize, usize)>,
    order: Vec<String>,
    data: Vec<f32>,
}

impl Sidecar {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Appends a vector. Re-inserting an existing reference is a no-op when the
    /// vector is identical and an error otherwise.
    pub fn insert(&mut self, key: impl Into<String>, vector: &[f32]) -> Result<(), StoreError> {
        let key = key.into();
        if let Some(existing) = self.get(&key) {
            if existing == vector {
                return Ok(());
            }
            return Err(StoreError::schema(key, "duplicate embedding reference with different contents"));
        }
        self.index.insert(key.clone(), (self.data.len(), vector.len()));
        self.order.push(key);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.index.get(key).map(|&(start, dim)| &self.data[start..start + dim])
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header: BTreeMap<&str, IndexEntry> = self
            .index
            .iter()
            .map(|(k, &(start, dim))| (k.as_str(), IndexEntry { offset: (start * 4) as u64, dim: dim as u32 }))
            .collect();
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self, StoreError> {
        let bad = |msg: &str| StoreError::schema(origin.to_string(), msg.to_string());
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(bad("missing ISEB magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported sidecar version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: BTreeMap<String, IndexEntry> =
            serde_json::from_slice(&bytes[16..body_start]).map_err(|e| bad(&format!("bad header json: {e}")))?;
        let body = &bytes[body_start..];
        if body.len() % 4 != 0 {
            return Err(bad("vector section is not a whole number of f32 values"));
        }
        let data: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let mut entries: Vec<(String, IndexEntry)> = header.into_iter().collect();
        entries.sort_by_key(|(_, e)| e.offset);
        let mut index = BTreeMap::new();
        let mut order = Vec::with_capacity(entries.len());
        for (key, entry) in entries {
            if entry.offset % 4 != 0 {
                return Err(bad(&format!("misaligned offset for {key}")));
            }
            let start = (entry.offset / 4) as usize;
            let end = start + entry.dim as usize;
            if end > data.len() {
                return Err(bad(&format!("entry {key} runs past end of file")));
            }
            index.insert(key.clone(), (start, entry.dim as usize));
            order.push(key);
        }
        Ok(Self { index, order, data })
    }

    pub fn write(&self, path: &Path) -> Result<(), StoreError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| StoreError::io(path.display(), e))
    }

    pub fn read(path: &Path) -> Result<Self, StoreError> {
        let bytes = std::fs::read(path).map_err(|e| StoreError::io(path.display(), e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
