//! `MDGC` checkpoints: magic, version byte, CRC32 of the payload, u64 payload
//! length, payload. The payload holds length-prefixed JSON for the training
//! and model configs and the metric snapshot, the epoch, the named parameter
//! table as embedded `MDGT` tensors, and the Adam state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, Selection, TrainConfig, TrainError};
use crate::metrics::MetricsReport;
use crate::model::{Model, ModelConfig};
use crate::nn::ParamSet;
use crate::tensor::io as tio;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"MDGC";
pub const CKPT_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 8;

/// Test-split evaluation recorded with a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub report: MetricsReport,
    pub selection: Selection,
    pub selection_auc: Option<f64>,
    pub seen_auc: Option<f64>,
    pub unseen_auc: Option<f64>,
    pub train_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub metrics: Option<MetricSnapshot>,
    pub params: ParamSet<f32>,
    pub adam: AdamState<f32>,
}

impl Checkpoint {
    /// Rebuilds the model and loads the stored parameters, checking that the
    /// two tables have the same names.
    pub fn model(&self) -> Result<Model<f32>, TrainError> {
        let mut model = Model::new(&self.model_config, 0)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copies the stored parameters into `model`; fails with the missing and
    /// extra names when the tables differ.
    pub fn load_into(&self, model: &mut Model<f32>) -> Result<(), TrainError> {
        model.params.load_from(&self.params)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = Vec::new();
        put_str(&mut p, &serde_json::to_string(&self.train_config).expect("config serializes"));
        put_str(&mut p, &serde_json::to_string(&self.model_config).expect("config serializes"));
        p.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        put_str(&mut p, &serde_json::to_string(&self.metrics).expect("metrics serialize"));
        p.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut p, name);
            tio::encode(t, &mut p);
        }
        p.extend_from_slice(&self.adam.step.to_le_bytes());
        p.extend_from_slice(&(self.adam.m.len() as u32).to_le_bytes());
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            tio::encode(m, &mut p);
            tio::encode(v, &mut p);
        }
        let mut out = Vec::with_capacity(HEADER_LEN + p.len());
        out.extend_from_slice(CKPT_MAGIC);
        out.push(CKPT_VERSION);
        out.extend_from_slice(&crc32fast::hash(&p).to_le_bytes());
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        out.extend_from_slice(&p);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let bad = |m: &str| TrainError::Checkpoint(m.to_string());
        if bytes.len() < HEADER_LEN {
            return Err(bad("truncated header"));
        }
        if &bytes[..4] != CKPT_MAGIC {
            return Err(bad("bad magic bytes"));
        }
        if bytes[4] != CKPT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {}", bytes[4])));
        }
        let crc = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
        let len = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != len {
            return Err(TrainError::Checkpoint(format!("payload is {} bytes, header says {len}", payload.len())));
        }
        if crc32fast::hash(payload) != crc {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { b: payload, at: 0 };
        let train_config: TrainConfig =
            serde_json::from_str(&r.string()?).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let model_config: ModelConfig =
            serde_json::from_str(&r.string()?).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let epoch = r.u64()? as usize;
        let metrics = serde_json::from_str(&r.string()?).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let n = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..n {
            let name = r.string()?;
            let t = r.tensor()?;
            params.add(name, t)?;
        }
        let step = r.u64()?;
        let k = r.u32()? as usize;
        let (mut m, mut v) = (Vec::with_capacity(k), Vec::with_capacity(k));
        for _ in 0..k {
            m.push(r.tensor()?);
            v.push(r.tensor()?);
        }
        if r.at != payload.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Checkpoint { train_config, model_config, epoch, metrics, params, adam: AdamState { step, m, v } })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], TrainError> {
        let s = self.b.get(self.at..self.at + n).ok_or_else(|| TrainError::Checkpoint("truncated payload".into()))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, TrainError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| TrainError::Checkpoint("name is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>, TrainError> {
        let (t, used) = tio::decode(&self.b[self.at..])?;
        self.at += used;
        Ok(t)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    fs::write(path, ckpt.to_bytes()).map_err(|source| TrainError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = fs::read(path).map_err(|source| TrainError::Io { path: path.display().to_string(), source })?;
    Checkpoint::from_bytes(&bytes)
}
