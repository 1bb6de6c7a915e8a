//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VARC"  u32 version  u64 meta_len  meta_len bytes of UTF-8 JSON
//! u64 tensor_count
//! per tensor: u32 name_len, name, u32 rank, rank x u64 dims, f32 payload
//! ```
//!
//! Optimizer moments, when present, are stored as extra tensors named
//! `adam.m/<param>` and `adam.v/<param>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{AdamState, NnError, ParamStore, Tensor};
use crate::vit::{ModelError, VitConfig, VitModel};

pub const MAGIC: &[u8; 4] = b"VARC";
pub const FORMAT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("{0} trailing bytes after the tensor table")]
    TrailingBytes(usize),
    #[error("malformed tensor entry: {0}")]
    BadTensor(String),
    #[error("checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: VitConfig,
    pub seed: u64,
    pub epoch: usize,
    /// SHA-256 of the training data, hex.
    pub data_hash: String,
    /// Task id for each embedding row.
    pub task_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_step: Option<u64>,
    /// The run configuration that produced the checkpoint.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub run: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &VitModel, adam: Option<&AdamState>, mut meta: CheckpointMeta) -> Checkpoint {
        meta.model = model.config().clone();
        let params = model.params().params();
        let mut tensors: Vec<(String, Tensor)> = params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        meta.adam_step = adam.map(|a| a.t);
        if let Some(a) = adam {
            for (prefix, moments) in [(ADAM_M, &a.m), (ADAM_V, &a.v)] {
                for (p, m) in params.iter().zip(moments) {
                    let t = Tensor::from_vec(p.value.shape(), m.clone()).expect("moments match parameter shapes");
                    tensors.push((format!("{prefix}{}", p.name), t));
                }
            }
        }
        Checkpoint { meta, tensors }
    }

    fn param_store(&self) -> Result<ParamStore, NnError> {
        let mut ps = ParamStore::new();
        for (name, t) in &self.tensors {
            if !name.starts_with(ADAM_M) && !name.starts_with(ADAM_V) {
                ps.add(name.clone(), t.clone())?;
            }
        }
        Ok(ps)
    }

    pub fn model(&self) -> Result<VitModel, CheckpointError> {
        let ps = self.param_store().map_err(ModelError::from)?;
        Ok(VitModel::from_params(self.meta.model.clone(), ps)?)
    }

    /// Optimizer state aligned with `model`'s parameter order, if stored.
    pub fn adam_state(&self, model: &VitModel) -> Option<AdamState> {
        let t = self.meta.adam_step?;
        let find = |name: String| self.tensors.iter().find(|(n, _)| *n == name).map(|(_, t)| t.data().to_vec());
        let mut m = Vec::new();
        let mut v = Vec::new();
        for p in model.params().params() {
            m.push(find(format!("{ADAM_M}{}", p.name))?);
            v.push(find(format!("{ADAM_V}{}", p.name))?);
        }
        Some(AdamState { m, v, t })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let payload: usize = self.tensors.iter().map(|(n, t)| 8 + n.len() + 8 * t.shape().len() + 4 * t.len()).sum();
        let mut out = Vec::with_capacity(24 + meta.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let meta_len = r.len_u64()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.len_u64()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::BadTensor("name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.len_u64()?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::BadTensor(format!("{name}: size overflows")))?;
            let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::from_vec(&shape, data).map_err(|e| CheckpointError::BadTensor(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Checkpoint { meta, tensors })
    }

    /// Writes to a temporary file in the target directory, then renames it
    /// into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

/// Temp file + fsync + rename in the destination directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize, CheckpointError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| CheckpointError::Truncated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (VitModel, CheckpointMeta) {
        let mut cfg = VitConfig::tiny(8, 16, 1, 2);
        cfg.num_task_embeddings = 2;
        let model = VitModel::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let meta = CheckpointMeta {
            model: cfg,
            seed: 3,
            epoch: 0,
            data_hash: "00".into(),
            task_ids: vec!["a".into(), "b".into()],
            adam_step: None,
            run: serde_json::Value::Null,
        };
        (model, meta)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (model, meta) = tiny();
        let mut adam = AdamState::new(model.params());
        adam.t = 7;
        adam.m[0][0] = 0.25;
        let ck = Checkpoint::from_model(&model, Some(&adam), meta);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let m2 = back.model().unwrap();
        assert_eq!(m2.params().params(), model.params().params());
        assert_eq!(back.adam_state(&m2).unwrap(), adam);
    }

    #[test]
    fn rejects_corruption() {
        let (model, meta) = tiny();
        let bytes = Checkpoint::from_model(&model, None, meta).to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"NOPE"), Err(CheckpointError::BadMagic)));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(CheckpointError::UnsupportedVersion(2))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated)));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(Checkpoint::from_bytes(&longer), Err(CheckpointError::TrailingBytes(1))));
    }
}
