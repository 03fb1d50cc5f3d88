//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes   "HCVPCKPT"
//! version  u32
//! hlen     u64       length of the header in bytes
//! header   hlen      UTF-8 JSON: run state and the parameter manifest
//! payload  f64 LE    parameter values in manifest order, then (if present)
//!                    first and second optimizer moments of every
//!                    trainable parameter, in manifest order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::optim::{AdamWConfig, AdamWState};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"HCVPCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    config_hash: String,
    step: u64,
    epoch: u64,
    cursor: usize,
    best_val_accuracy: Option<f64>,
    best_step: Option<u64>,
    params: Vec<ParamEntry>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamWConfig,
    step_count: u64,
    has_moments: bool,
}

/// Complete training state: enough to resume bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    pub step: u64,
    pub epoch: u64,
    pub cursor: usize,
    pub best_val_accuracy: Option<f64>,
    pub best_step: Option<u64>,
    pub manifest: Vec<ParamEntry>,
    pub values: Vec<Vec<f64>>,
    pub optimizer: Option<AdamWState>,
}

impl Checkpoint {
    /// Captures every tensor of `model` (frozen ones included).
    pub fn capture_params<P: Parameterized + ?Sized>(model: &P) -> (Vec<ParamEntry>, Vec<Vec<f64>>) {
        let (mut manifest, mut values) = (Vec::new(), Vec::new());
        model.visit("", &mut |name, t| {
            manifest.push(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                trainable: t.requires_grad(),
            });
            values.push(t.data().to_vec());
        });
        (manifest, values)
    }

    /// Writes the stored values into `model`, matching by name. Every tensor
    /// of the model must be present with the same shape.
    pub fn restore_params<P: Parameterized + ?Sized>(&self, model: &mut P) -> Result<()> {
        let mut err = None;
        let mut seen = 0;
        model.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.manifest.iter().position(|e| e.name == name) {
                Some(i) if self.manifest[i].shape == t.shape() => {
                    t.data_mut().copy_from_slice(&self.values[i]);
                    t.set_requires_grad(self.manifest[i].trainable);
                    seen += 1;
                }
                Some(i) => {
                    err = Some(Error::Shape(format!(
                        "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                        self.manifest[i].shape,
                        t.shape()
                    )))
                }
                None => err = Some(Error::Config(format!("checkpoint has no tensor `{name}`"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != self.manifest.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model has {seen}",
                self.manifest.len()
            )));
        }
        Ok(())
    }

    pub fn has_tensor_prefix(&self, prefix: &str) -> bool {
        self.manifest.iter().any(|e| e.name.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let trainable: Vec<usize> = (0..self.manifest.len()).filter(|&i| self.manifest[i].trainable).collect();
        let has_moments = self
            .optimizer
            .as_ref()
            .is_some_and(|o| !o.first_moment.is_empty());
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            step: self.step,
            epoch: self.epoch,
            cursor: self.cursor,
            best_val_accuracy: self.best_val_accuracy,
            best_step: self.best_step,
            params: self.manifest.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step_count: o.step_count,
                has_moments,
            }),
        };
        let header = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |v: &[f64]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        self.values.iter().for_each(|v| put(v));
        if let (Some(o), true) = (&self.optimizer, has_moments) {
            debug_assert_eq!(o.first_moment.len(), trainable.len());
            o.first_moment.iter().for_each(|v| put(v));
            o.second_moment.iter().for_each(|v| put(v));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(path, reason.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| bad(&format!("header: {e}")))?;

        let mut pos = header_end;
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let end = n
                .checked_mul(8)
                .and_then(|b| pos.checked_add(b))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| bad("truncated payload"))?;
            let v = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos = end;
            Ok(v)
        };
        let values = header
            .params
            .iter()
            .map(|e| take(e.shape.iter().product()))
            .collect::<Result<Vec<_>>>()?;
        let optimizer = match &header.optimizer {
            None => None,
            Some(o) => {
                let mut state = AdamWState::new(o.config);
                state.step_count = o.step_count;
                if o.has_moments {
                    let sizes: Vec<usize> = header
                        .params
                        .iter()
                        .filter(|e| e.trainable)
                        .map(|e| e.shape.iter().product())
                        .collect();
                    state.first_moment = sizes.iter().map(|&n| take(n)).collect::<Result<_>>()?;
                    state.second_moment = sizes.iter().map(|&n| take(n)).collect::<Result<_>>()?;
                }
                Some(state)
            }
        };
        if pos != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Checkpoint {
            config: header.config,
            config_hash: header.config_hash,
            step: header.step,
            epoch: header.epoch,
            cursor: header.cursor,
            best_val_accuracy: header.best_val_accuracy,
            best_step: header.best_step,
            manifest: header.params,
            values,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
