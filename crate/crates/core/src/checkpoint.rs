//! Binary checkpoints.
//!
//! ```text
//! b"MVDF"  u32 version
//! u64 metadata length, metadata JSON
//! u32 tensor count, then per tensor:
//!   u32 name length, name, u8 dtype (0 = f32), u32 rank, rank x u64 dims,
//!   little-endian payload
//! ```
//!
//! Tensors are the model parameters (`model.<name>`) followed, when present,
//! by the optimiser moments (`adam.m.<name>`, `adam.v.<name>`). All integers
//! are little-endian. Saving a loaded checkpoint reproduces it byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Weights;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::infer::weights_hash;
use crate::linalg::Mat;
use crate::optim::AdamW;

pub const MAGIC: &[u8; 4] = b"MVDF";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Completed optimiser steps.
    pub step: u64,
    pub weights_hash: String,
    pub has_optimizer: bool,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub weights: Weights<f32>,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.optimizer.as_ref().map_or(0, |o| o.step)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            step: self.step(),
            weights_hash: weights_hash(&self.weights),
            has_optimizer: self.optimizer.is_some(),
            config: self.config.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.weights.config != self.config.model {
            return Err(Error::Checkpoint("weights do not match the model config".into()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta())?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);

        let mut tensors: Vec<(String, &Mat<f32>)> = prefixed("model.", &self.weights);
        if let Some(opt) = &self.optimizer {
            tensors.extend(prefixed("adam.m.", &opt.m));
            tensors.extend(prefixed("adam.v.", &opt.v));
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, m) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(m.rows as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols as u64).to_le_bytes());
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {VERSION}"
            )));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        meta.config.model.validate()?;

        let mut weights = Weights::<f32>::zeros(&meta.config.model)?;
        let mut optimizer = if meta.has_optimizer {
            let mut o = AdamW::new(&meta.config.model, meta.config.train.optimizer)?;
            o.step = meta.step;
            Some(o)
        } else {
            None
        };
        let count = r.u32()? as usize;
        let mut slots: Vec<(String, &mut Mat<f32>)> = weights
            .params_mut()
            .into_iter()
            .map(|(n, m)| (format!("model.{n}"), m))
            .collect();
        if let Some(o) = optimizer.as_mut() {
            slots.extend(o.m.params_mut().into_iter().map(|(n, m)| (format!("adam.m.{n}"), m)));
            slots.extend(o.v.params_mut().into_iter().map(|(n, m)| (format!("adam.v.{n}"), m)));
        }
        if count != slots.len() {
            return Err(Error::Checkpoint(format!(
                "{count} tensors stored but the config implies {}",
                slots.len()
            )));
        }
        for (expected, slot) in slots.iter_mut() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if name != expected {
                return Err(Error::Checkpoint(format!("expected tensor {expected}, found {name}")));
            }
            if r.u8()? != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("{name}: unsupported dtype")));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if dims != [slot.rows, slot.cols] {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {dims:?}, model expects [{}, {}]",
                    slot.rows, slot.cols
                )));
            }
            let payload = r.take(slot.data.len() * 4)?;
            for (v, c) in slot.data.iter_mut().zip(payload.chunks_exact(4)) {
                *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
        }
        let hash = weights_hash(&weights);
        if hash != meta.weights_hash {
            return Err(Error::Checkpoint(format!(
                "weights hash {hash} does not match recorded {}",
                meta.weights_hash
            )));
        }
        Ok(Self {
            config: meta.config,
            weights,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write then rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn prefixed<'a>(prefix: &str, w: &'a Weights<f32>) -> Vec<(String, &'a Mat<f32>)> {
    w.params().into_iter().map(|(n, m)| (format!("{prefix}{n}"), m)).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
}
