//! Versioned binary checkpoints and checkpoint averaging.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "DESKMTCK"
//! version  u32
//! meta_len u64, then meta_len bytes of UTF-8 JSON metadata
//! count    u32, then per tensor:
//!   name_len u32, name bytes, dtype tag u8, rank u32, dims u64 × rank,
//!   payload (dtype width × element count bytes)
//! ```
//!
//! Parameters are stored as `param/<name>`, velocities as `velocity/<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::OptimizerState;
use crate::error::TrainError;
use crate::model::{ModelConfig, ParamStore};
use crate::tensor::{DType, Scalar, Tensor};

type Result<T> = std::result::Result<T, TrainError>;

const MAGIC: &[u8; 8] = b"DESKMTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub optimizer: OptimizerState<T>,
    pub epoch: u64,
    pub valid_history: Vec<f64>,
    /// Labels of the checkpoints this one averages, if any.
    pub averaged_from: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    dtype: String,
    config: ModelConfig,
    epoch: u64,
    step: u64,
    momentum: f64,
    valid_history: Vec<f64>,
    averaged_from: Vec<String>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn label(&self) -> String {
        format!("epoch{}-step{}", self.epoch, self.optimizer.step)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            dtype: format!("{:?}", T::DTYPE),
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.optimizer.step,
            momentum: self.optimizer.momentum,
            valid_history: self.valid_history.clone(),
            averaged_from: self.averaged_from.clone(),
        };
        let meta = serde_json::to_vec(&meta).map_err(|e| TrainError::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let records: Vec<(String, &Tensor<T>)> = self
            .params
            .iter()
            .map(|(k, t)| (format!("param/{k}"), t))
            .chain(
                self.optimizer
                    .velocity
                    .iter()
                    .map(|(k, t)| (format!("velocity/{k}"), t)),
            )
            .collect();
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.tag());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(TrainError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Mismatch(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let meta_len = r.u64()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| TrainError::Format(format!("metadata: {e}")))?;
        let expected = format!("{:?}", T::DTYPE);
        if meta.dtype != expected {
            return Err(TrainError::Mismatch(format!(
                "checkpoint holds {} tensors, loader expects {expected}",
                meta.dtype
            )));
        }
        let count = r.u32()?;
        let mut params = BTreeMap::new();
        let mut velocity = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| TrainError::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let tag = r.take(1)?[0];
            if DType::from_tag(tag) != Some(T::DTYPE) {
                return Err(TrainError::Format(format!("tensor '{name}' has dtype tag {tag}")));
            }
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let w = T::DTYPE.width();
            let payload = r.take(n * w)?;
            let data: Vec<T> = payload.chunks_exact(w).map(T::read_le).collect();
            let t = Tensor::new(shape, data).map_err(|e| TrainError::Format(e.to_string()))?;
            if let Some(p) = name.strip_prefix("param/") {
                params.insert(p.to_string(), t);
            } else if let Some(v) = name.strip_prefix("velocity/") {
                velocity.insert(v.to_string(), t);
            } else {
                return Err(TrainError::Format(format!("unknown record '{name}'")));
            }
        }
        if r.pos != bytes.len() {
            return Err(TrainError::Format("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config: meta.config,
            params,
            optimizer: OptimizerState {
                velocity,
                momentum: meta.momentum,
                step: meta.step,
            },
            epoch: meta.epoch,
            valid_history: meta.valid_history,
            averaged_from: meta.averaged_from,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
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
            .ok_or_else(|| TrainError::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Elementwise mean of every parameter. Optimizer state, epoch and history
/// come from the latest input (highest step, then epoch).
///
/// Each element's mean is taken as `min + Σ(x − min) / n` over its values in
/// sorted order: independent of the order of `checkpoints`, and exact when
/// all inputs agree.
pub fn average_checkpoints<T: Scalar>(checkpoints: &[Checkpoint<T>]) -> Result<Checkpoint<T>> {
    let first = checkpoints
        .first()
        .ok_or_else(|| TrainError::BadSetting("nothing to average".into()))?;
    let mut problems = Vec::new();
    for (i, c) in checkpoints.iter().enumerate().skip(1) {
        if c.config != first.config {
            problems.push(format!("checkpoint {i}: model configuration differs"));
        }
        for (name, t) in &first.params {
            match c.params.get(name) {
                None => problems.push(format!("checkpoint {i}: missing '{name}'")),
                Some(u) if u.shape() != t.shape() => problems.push(format!(
                    "checkpoint {i}: '{name}' has shape {:?}, expected {:?}",
                    u.shape(),
                    t.shape()
                )),
                _ => {}
            }
        }
        for name in c.params.keys().filter(|k| !first.params.contains_key(*k)) {
            problems.push(format!("checkpoint {i}: unexpected '{name}'"));
        }
    }
    if !problems.is_empty() {
        return Err(TrainError::Mismatch(problems.join("; ")));
    }
    let n = T::of(checkpoints.len() as f64);
    let mut column = Vec::with_capacity(checkpoints.len());
    let params = first
        .params
        .iter()
        .map(|(name, t)| {
            let tensors: Vec<&Tensor<T>> = checkpoints.iter().map(|c| &c.params[name]).collect();
            let mean = Tensor::from_fn(t.shape(), |i| {
                column.clear();
                column.extend(tensors.iter().map(|u| u.data()[i]));
                column.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                let base = column[0];
                base + column.iter().fold(T::zero(), |acc, &x| acc + (x - base)) / n
            });
            (name.clone(), mean)
        })
        .collect();
    let latest = checkpoints
        .iter()
        .max_by_key(|c| (c.optimizer.step, c.epoch))
        .expect("non-empty");
    let mut averaged_from: Vec<String> = checkpoints.iter().map(Checkpoint::label).collect();
    averaged_from.sort();
    Ok(Checkpoint {
        config: first.config.clone(),
        params,
        optimizer: latest.optimizer.clone(),
        epoch: latest.epoch,
        valid_history: latest.valid_history.clone(),
        averaged_from,
    })
}
