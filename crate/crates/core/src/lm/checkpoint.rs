use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layout::TensorSpec;
use super::model::Model;
use super::optim::AdamW;
use super::{ModelConfig, TrainConfig};
use crate::error::{fsx, Error, Result};

const MAGIC: &[u8; 8] = b"WUGLABCK";
const FORMAT_VERSION: u32 = 1;

/// Model weights plus everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: AdamW<f32>,
    pub train_config: TrainConfig,
    pub step: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: usize,
    adam_t: u64,
    /// Data order and dropout masks are pure functions of (seed, step).
    rng: RngState,
    n_params: usize,
    sections: Vec<String>,
    tensors: Vec<TensorSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    step: usize,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// Layout: magic, u32 version, u64 header length, JSON header, then the
    /// parameter, first-moment and second-moment vectors as little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            model_config: self.model.config.clone(),
            train_config: self.train_config.clone(),
            step: self.step,
            adam_t: self.optimizer.t,
            rng: RngState {
                seed: self.train_config.seed,
                step: self.step,
            },
            n_params: self.model.params.len(),
            sections: vec!["params".into(), "adam_m".into(), "adam_v".into()],
            tensors: self.model.layout.tensors.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let n = self.model.params.len();
        let mut out = Vec::with_capacity(20 + json.len() + 12 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for section in [&self.model.params, &self.optimizer.m, &self.optimizer.v] {
            for x in section.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body])?;
        let n = header.n_params;
        if bytes.len() != body + 12 * n {
            return Err(Error::Checkpoint(format!(
                "expected {} tensor bytes, found {}",
                12 * n,
                bytes.len() - body
            )));
        }
        let read = |k: usize| -> Vec<f32> {
            bytes[body + 4 * n * k..body + 4 * n * (k + 1)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        };
        let model = Model::from_params(header.model_config, read(0))?;
        if model.layout.tensors != header.tensors {
            return Err(bad("tensor table does not match the model config"));
        }
        Ok(Checkpoint {
            model,
            optimizer: AdamW {
                m: read(1),
                v: read(2),
                t: header.adam_t,
            },
            train_config: header.train_config,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsx::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsx::read(path)?)
    }
}
