//! Versioned binary checkpoint container.
//!
//! Layout: magic "CGVLCKPT", u32 version, u32 config length, config
//! JSON (TrainConfig plus step counter), u32 tensor count, then per
//! tensor: u32 name length, name bytes, u8 trainable flag, u32 rank,
//! u64 dims, u64 element count, f64 little-endian data. Round trips
//! are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::TrainConfig;
use crate::model::{Stage, VlmModel};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"CGVLCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("checkpoint version {found} is incompatible with {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated or corrupt: {what}")]
    Corrupt { what: String },
    #[error("checkpoint config invalid: {0}")]
    BadConfig(#[from] serde_json::Error),
    #[error("parameter set mismatch: {what}")]
    ParamMismatch { what: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    step: usize,
}

/// In-memory checkpoint: config, step counter, and every named tensor
/// with its trainable tag.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: usize,
    pub tensors: Vec<(String, Tensor, bool)>,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serializes model parameters plus optimizer state under the given
/// config and step counter.
pub fn save_checkpoint(
    path: &Path,
    model: &VlmModel,
    opt: &AdamState,
    config: &TrainConfig,
    step: usize,
) -> Result<(), CheckpointError> {
    let mut tensors: Vec<(String, Tensor, bool)> = Vec::new();
    model.visit(&mut |name, t| {
        let trainable = VlmModel::is_trainable(name, config.stage);
        tensors.push((name.to_string(), t.clone(), trainable));
    });
    for (name, data) in &opt.first {
        tensors.push((format!("optm.{name}"), Tensor::vector(data.clone()), false));
    }
    for (name, data) in &opt.second {
        tensors.push((format!("optv.{name}"), Tensor::vector(data.clone()), false));
    }

    let meta = CheckpointMeta { config: config.clone(), step };
    let config_json = serde_json::to_vec(&meta)?;

    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    push_u32(&mut buf, CKPT_VERSION);
    push_u32(&mut buf, config_json.len() as u32);
    buf.extend_from_slice(&config_json);
    push_u32(&mut buf, tensors.len() as u32);
    for (name, tensor, trainable) in &tensors {
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        buf.push(*trainable as u8);
        push_u32(&mut buf, tensor.shape().len() as u32);
        for &dim in tensor.shape() {
            push_u64(&mut buf, dim as u64);
        }
        push_u64(&mut buf, tensor.numel() as u64);
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    file.write_all(&buf)
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt {
                what: format!("unexpected end of file reading {what}"),
            });
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    let mut cur = Cursor { buf: &raw, pos: 0 };

    if cur.take(8, "magic")? != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic { path: path.to_path_buf() });
    }
    let version = cur.u32("version")?;
    if version != CKPT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, expected: CKPT_VERSION });
    }
    let config_len = cur.u32("config length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(config_len, "config")?)?;

    let count = cur.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name = String::from_utf8(cur.take(name_len, "name")?.to_vec())
            .map_err(|_| CheckpointError::Corrupt { what: format!("tensor {i} name not UTF-8") })?;
        let trainable = cur.take(1, "trainable flag")?[0] != 0;
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("dim")? as usize);
        }
        let numel = cur.u64("element count")? as usize;
        let expected: usize = shape.iter().product();
        if numel != expected {
            return Err(CheckpointError::Corrupt {
                what: format!("{name}: {numel} elements for shape {shape:?}"),
            });
        }
        let bytes = cur.take(numel * 8, "tensor data")?;
        let data: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Corrupt { what: format!("{name}: {e}") })?;
        tensors.push((name, tensor, trainable));
    }
    if cur.pos != raw.len() {
        return Err(CheckpointError::Corrupt {
            what: format!("{} trailing bytes", raw.len() - cur.pos),
        });
    }
    Ok(Checkpoint { config: meta.config, step: meta.step, tensors })
}

impl Checkpoint {
    pub fn stage(&self) -> Stage {
        self.config.stage
    }

    /// Rebuilds the model: a seed-fresh skeleton whose every parameter
    /// is then overwritten from the stored tensors. Forward outputs
    /// reproduce the saved model bit-exactly.
    pub fn restore_model(&self) -> Result<VlmModel, CheckpointError> {
        let mut stored: BTreeMap<&str, &Tensor> = BTreeMap::new();
        for (name, tensor, _) in &self.tensors {
            if !name.starts_with("optm.") && !name.starts_with("optv.") {
                stored.insert(name, tensor);
            }
        }
        let mut model = VlmModel::init(self.config.seed, self.config.model.clone());
        let mut missing = Vec::new();
        let mut used = 0usize;
        model.visit_mut(&mut |name, t| match stored.get(name) {
            Some(saved) => {
                if saved.shape() != t.shape() {
                    missing.push(format!("{name} shape {:?} vs {:?}", saved.shape(), t.shape()));
                } else {
                    *t = (*saved).clone();
                    used += 1;
                }
            }
            None => missing.push(format!("{name} absent")),
        });
        if !missing.is_empty() {
            return Err(CheckpointError::ParamMismatch { what: missing.join("; ") });
        }
        if used != stored.len() {
            return Err(CheckpointError::ParamMismatch {
                what: format!("checkpoint has {} model tensors, model uses {used}", stored.len()),
            });
        }
        Ok(model)
    }

    /// Optimizer moments stored alongside the parameters.
    pub fn restore_opt_state(&self) -> AdamState {
        let mut state = AdamState { step: self.step, ..Default::default() };
        for (name, tensor, _) in &self.tensors {
            if let Some(base) = name.strip_prefix("optm.") {
                state.first.insert(base.to_string(), tensor.data().to_vec());
            } else if let Some(base) = name.strip_prefix("optv.") {
                state.second.insert(base.to_string(), tensor.data().to_vec());
            }
        }
        state
    }

    /// The named model tensors (optimizer state excluded).
    pub fn model_tensors(&self) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter(|(name, _, _)| !name.starts_with("optm.") && !name.starts_with("optv."))
            .map(|(name, tensor, _)| (name.clone(), tensor.clone()))
            .collect()
    }
}
