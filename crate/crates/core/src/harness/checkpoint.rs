//! Versioned binary checkpoints.
//!
//! ```text
//! "STCK" | u32 version | u64 header_len | JSON header
//! u32 tensor_count | { u8 section | u32 name_len | name | u32 rank | u64 dims.. | f32 data.. }*
//! ```
//!
//! Sections: 0 parameters, 1 Adam first moments, 2 Adam second moments.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{TrainConfig, TrainHistory};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, StnetParams};
use crate::nn::ParamStore;
use crate::optim::AdamConfig;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"STCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub order: Vec<usize>,
    pub cursor: usize,
    pub epoch_loss: f64,
    pub epoch_steps: u64,
    pub best_val: Option<f64>,
    pub stale: usize,
    pub wall_time_s: f64,
    pub history: TrainHistory,
    pub rng: RngState,
    pub adam: AdamConfig,
    pub adam_t: u64,
    pub params: ParamStore<f32>,
    pub adam_m: BTreeMap<String, Tensor<f32>>,
    pub adam_v: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn model_params(&self) -> StnetParams<f32> {
        StnetParams {
            config: self.model.clone(),
            store: self.params.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    step: u64,
    order: Vec<usize>,
    cursor: usize,
    epoch_loss: f64,
    epoch_steps: u64,
    best_val: Option<f64>,
    stale: usize,
    wall_time_s: f64,
    history: TrainHistory,
    rng: RngState,
    adam: AdamConfig,
    adam_t: u64,
}

fn put_tensor(out: &mut Vec<u8>, section: u8, name: &str, t: &Tensor<f32>) {
    out.push(section);
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let header = Header {
        model: ck.model.clone(),
        train: ck.train.clone(),
        epoch: ck.epoch,
        step: ck.step,
        order: ck.order.clone(),
        cursor: ck.cursor,
        epoch_loss: ck.epoch_loss,
        epoch_steps: ck.epoch_steps,
        best_val: ck.best_val,
        stale: ck.stale,
        wall_time_s: ck.wall_time_s,
        history: ck.history.clone(),
        rng: ck.rng,
        adam: ck.adam,
        adam_t: ck.adam_t,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let count = ck.params.len() + ck.adam_m.len() + ck.adam_v.len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, t) in ck.params.iter() {
        put_tensor(&mut out, 0, name, t);
    }
    for (section, map) in [(1u8, &ck.adam_m), (2, &ck.adam_v)] {
        for (name, t) in map {
            put_tensor(&mut out, section, name, t);
        }
    }
    // write-then-rename so an interrupted save never clobbers a good file
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.into(),
                expected: (self.at + n) as u64,
                found: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor {
        bytes: &bytes,
        at: 0,
        path,
    };
    let magic: [u8; 4] = match c.take(4) {
        Ok(m) => m.try_into().expect("4 bytes"),
        Err(_) => {
            let mut found = [0u8; 4];
            found[..bytes.len()].copy_from_slice(&bytes);
            return Err(Error::BadMagic {
                path: path.into(),
                expected: CHECKPOINT_MAGIC,
                found,
            });
        }
    };
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "checkpoint",
            version,
        });
    }
    let len = c.u64()? as usize;
    let header: Header = serde_json::from_slice(c.take(len)?)?;
    let count = c.u32()?;
    let mut params = ParamStore::new();
    let (mut adam_m, mut adam_v) = (BTreeMap::new(), BTreeMap::new());
    for _ in 0..count {
        let section = c.take(1)?[0];
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::Validation("tensor name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = c
            .take(4 * numel)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data)?;
        match section {
            0 => params.insert(name, t)?,
            1 => {
                adam_m.insert(name, t);
            }
            2 => {
                adam_v.insert(name, t);
            }
            s => return Err(Error::Validation(format!("unknown checkpoint section {s}"))),
        }
    }
    if c.at != bytes.len() {
        return Err(Error::DimMismatch(format!("{} trailing bytes in checkpoint", bytes.len() - c.at)));
    }
    Ok(Checkpoint {
        model: header.model,
        train: header.train,
        epoch: header.epoch,
        step: header.step,
        order: header.order,
        cursor: header.cursor,
        epoch_loss: header.epoch_loss,
        epoch_steps: header.epoch_steps,
        best_val: header.best_val,
        stale: header.stale,
        wall_time_s: header.wall_time_s,
        history: header.history,
        rng: header.rng,
        adam: header.adam,
        adam_t: header.adam_t,
        params,
        adam_m,
        adam_v,
    })
}
