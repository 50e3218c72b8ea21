//! `TDC1` checkpoints: parameters, momentum buffers and the position in the
//! training schedule.
//!
//! Layout (little endian):
//!
//! ```text
//! "TDC1" u32 version
//! u64 config hash, u32 phase, u64 iteration, u64 seed
//! u32 n, n bytes of model config JSON
//! u32 parameter count, then per parameter:
//!   u32 name length, name, u32 ndim, ndim x u32 dims, values f64, momentum f64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TaskDecompModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TDC1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub momentum: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub params: Vec<SavedParam>,
    pub phase: usize,
    pub iteration: usize,
    pub seed: u64,
    pub config_hash: u64,
}

impl Checkpoint {
    pub fn capture(model: &TaskDecompModel, phase: usize, iteration: usize, seed: u64, config_hash: u64) -> Self {
        Self {
            model_config: model.config().clone(),
            params: model
                .params
                .iter()
                .map(|p| SavedParam {
                    name: p.name.clone(),
                    shape: p.shape().to_vec(),
                    values: p.value.data().to_vec(),
                    momentum: p.momentum.clone(),
                })
                .collect(),
            phase,
            iteration,
            seed,
            config_hash,
        }
    }

    /// Copies parameters and momentum buffers into `model`, which must have
    /// exactly the saved layout.
    pub fn restore_into(&self, model: &mut TaskDecompModel) -> Result<()> {
        if model.params.len() != self.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has {} parameter tensors, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (saved, p) in self.params.iter().zip(model.params.iter()) {
            if saved.shape != p.shape() || saved.name != p.name {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {} has shape {:?} in the checkpoint but {} has shape {:?} in the model",
                    saved.name,
                    saved.shape,
                    p.name,
                    p.shape()
                )));
            }
        }
        for (saved, p) in self.params.iter().zip(model.params.iter_mut()) {
            p.value = Tensor::new(saved.shape.clone(), saved.values.clone())?;
            p.momentum.clone_from(&saved.momentum);
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(())
    }

    /// Builds a fresh model from the stored configuration and loads it.
    pub fn to_model(&self) -> Result<TaskDecompModel> {
        let mut m = TaskDecompModel::build(&self.model_config, 0)?;
        self.restore_into(&mut m)?;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.config_hash.to_le_bytes());
        b.extend_from_slice(&(self.phase as u32).to_le_bytes());
        b.extend_from_slice(&(self.iteration as u64).to_le_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        let cfg = serde_json::to_vec(&self.model_config).expect("serializable");
        b.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        b.extend_from_slice(&cfg);
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            b.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            b.extend_from_slice(p.name.as_bytes());
            b.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.values.iter().chain(&p.momentum) {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt {
                offset: 0,
                reason: "not a TDC1 checkpoint".into(),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let config_hash = r.u64("config hash")?;
        let phase = r.u32("phase")? as usize;
        let iteration = r.u64("iteration")? as usize;
        let seed = r.u64("seed")?;
        let n = r.u32("config length")? as usize;
        let at = r.pos;
        let model_config: ModelConfig = serde_json::from_slice(r.take(n, "model config")?).map_err(|e| Error::Corrupt {
            offset: at as u64,
            reason: format!("model config: {e}"),
        })?;
        let count = r.u32("parameter count")? as usize;
        let mut params = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(len, "name")?.to_vec()).map_err(|_| Error::Corrupt {
                offset: at as u64,
                reason: "parameter name is not UTF-8".into(),
            })?;
            let ndim = r.u32("ndim")? as usize;
            let shape = (0..ndim).map(|_| r.u32("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product::<usize>();
            let values = r.f64s(numel, "values")?;
            let momentum = r.f64s(numel, "momentum")?;
            params.push(SavedParam {
                name,
                shape,
                values,
                momentum,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt {
                offset: r.pos as u64,
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self {
            model_config,
            params,
            phase,
            iteration,
            seed,
            config_hash,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.bytes.len() - self.pos {
            return Err(Error::Corrupt {
                offset: self.pos as u64,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).unwrap_or(usize::MAX), what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
