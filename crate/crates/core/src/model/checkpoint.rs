//! Checkpoint file: `u64` little-endian header length, a JSON header with the
//! configs and a tensor manifest, then the little-endian `f32` payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamSet, Tensor};
use super::{Model, ModelConfig};
use super::train::TrainConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TDACKPT1";

/// Enough to regenerate the batch stream: batches are keyed by `(seed, step)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub train: Option<TrainConfig>,
    pub step: usize,
    pub rng_state: RngState,
    pub parameters: ParamSet<f32>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    group: String,
    shape: Vec<usize>,
    decay: bool,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    train: Option<TrainConfig>,
    step: usize,
    rng_state: RngState,
    adam_t: Option<u64>,
    tensors: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>) -> Self {
        Self {
            config: model.config.clone(),
            train: None,
            step: 0,
            rng_state: RngState {
                seed: model.config.seed,
                next_step: 0,
            },
            parameters: model.params.clone(),
            optimizer: None,
        }
    }

    pub fn into_model(self) -> Result<Model<f32>> {
        Model::from_params(self.config, self.parameters)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0;
        let mut push = |name: &str, group: &str, shape: &[usize], decay: bool, data: &[f32]| {
            entries.push(Entry {
                name: name.to_string(),
                group: group.to_string(),
                shape: shape.to_vec(),
                decay,
                offset,
                len: data.len(),
            });
            for x in data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
            offset += data.len();
        };
        for t in &self.parameters.tensors {
            push(&t.name, "param", &t.shape, t.decay, &t.data);
        }
        if let Some(opt) = &self.optimizer {
            for (t, (m, v)) in self.parameters.tensors.iter().zip(opt.m.iter().zip(&opt.v)) {
                push(&t.name, "adam_m", &t.shape, t.decay, m);
                push(&t.name, "adam_v", &t.shape, t.decay, v);
            }
        }
        let header = Header {
            config: self.config.clone(),
            train: self.train.clone(),
            step: self.step,
            rng_state: self.rng_state,
            adam_t: self.optimizer.as_ref().map(|o| o.t),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[16 + hlen..];
        if payload.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in header.tensors {
            let data = floats
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| bad("tensor extends past payload"))?
                .to_vec();
            if e.shape.iter().product::<usize>() != e.len {
                return Err(Error::Checkpoint(format!("tensor {} has inconsistent shape", e.name)));
            }
            match e.group.as_str() {
                "param" => params.push(Tensor {
                    name: e.name,
                    shape: e.shape,
                    data,
                    decay: e.decay,
                }),
                "adam_m" => m.push(data),
                "adam_v" => v.push(data),
                other => return Err(Error::Checkpoint(format!("unknown tensor group {other}"))),
            }
        }
        let optimizer = header.adam_t.map(|t| OptimizerState { t, m, v });
        Ok(Self {
            config: header.config,
            train: header.train,
            step: header.step,
            rng_state: header.rng_state,
            parameters: ParamSet { tensors: params },
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
