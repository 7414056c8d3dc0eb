//! `ISCR` checkpoint files.
//!
//! Layout: `b"ISCR"`, version (`u32` LE), header length (`u64` LE), JSON
//! header, then every tensor's `f32` LE values in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelDims, ModelError, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ISCR";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dims: ModelDims,
    pub stage: String,
    pub epoch: u32,
    pub log_tau: f32,
    pub validation_score: Option<f64>,
    pub seed: u64,
    pub tensors: Vec<TensorSpec>,
}

impl CheckpointMeta {
    /// Header for `params`; the tensor manifest and `log_tau` are filled in.
    pub fn describe(params: &ModelParams<f32>, stage: &str, epoch: u32, validation_score: Option<f64>, seed: u64) -> Self {
        Self {
            dims: params.dims,
            stage: stage.to_string(),
            epoch,
            log_tau: params.log_tau,
            validation_score,
            seed,
            tensors: params.tensors().into_iter().map(|(name, shape, _)| TensorSpec { name, shape }).collect(),
        }
    }
}

pub fn checkpoint_bytes(params: &ModelParams<f32>, meta: &CheckpointMeta) -> Vec<u8> {
    let header = serde_json::to_vec(meta).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + params.param_count() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, values) in params.tensors() {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ModelParams<f32>, CheckpointMeta), ModelError> {
    let bad = |m: String| ModelError::Checkpoint(m);
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing ISCR magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..body_start]).map_err(|e| bad(format!("bad header: {e}")))?;
    let mut params = ModelParams::<f32>::zeros(meta.dims);
    let expected: Vec<TensorSpec> =
        params.tensors().into_iter().map(|(name, shape, _)| TensorSpec { name, shape }).collect();
    if expected != meta.tensors {
        return Err(bad("tensor manifest does not match architecture dims".into()));
    }
    let mut body = bytes[body_start..].chunks_exact(4);
    if body.len() != params.param_count() || !body.remainder().is_empty() {
        return Err(bad(format!("expected {} values, found {} bytes", params.param_count(), bytes.len() - body_start)));
    }
    for (_, values) in params.tensors_mut() {
        for v in values.iter_mut() {
            *v = f32::from_le_bytes(body.next().expect("length checked").try_into().expect("4 bytes"));
        }
    }
    if params.log_tau.to_bits() != meta.log_tau.to_bits() {
        return Err(bad("header log_tau disagrees with tensor data".into()));
    }
    Ok((params, meta))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams<f32>, meta: &CheckpointMeta) -> Result<(), ModelError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| ModelError::Io { path: parent.display().to_string(), source })?;
    }
    std::fs::write(path, checkpoint_bytes(params, meta))
        .map_err(|source| ModelError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, CheckpointMeta), ModelError> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    let (mut params, meta) = checkpoint_from_bytes(&bytes)?;
    params.clamp_tau();
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_exact() {
        let params = ModelParams::<f32>::init(ModelDims::uniform(5), &mut ChaCha8Rng::seed_from_u64(2));
        let meta = CheckpointMeta::describe(&params, "pretrain", 3, Some(0.75), 9);
        let bytes = checkpoint_bytes(&params, &meta);
        assert_eq!(&bytes[..4], b"ISCR");
        let (back, back_meta) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, params);
        assert_eq!(back_meta, meta);
        assert_eq!(checkpoint_bytes(&back, &back_meta), bytes);
    }

    #[test]
    fn rejects_truncated_body() {
        let params = ModelParams::<f32>::init(ModelDims::uniform(3), &mut ChaCha8Rng::seed_from_u64(2));
        let meta = CheckpointMeta::describe(&params, "finetune", 0, None, 0);
        let bytes = checkpoint_bytes(&params, &meta);
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(checkpoint_from_bytes(b"ISEB").is_err());
    }
}
