//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic, a little-endian `u32` format version, a
//! little-endian `u64` metadata length, the metadata as JSON (model config,
//! tensor manifest, training state), then every tensor of the manifest in
//! order as little-endian `f64`. Parameters come first, followed by the
//! Adam first and second moments when present.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{AdamState, ParamId, Tensor};

pub const MAGIC: &[u8; 8] = b"LTNTREC\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub slot: Slot,
    pub shape: Vec<usize>,
}

/// Where training stands when the checkpoint is written.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub adam_step: u64,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub n_items: usize,
    pub state: TrainState,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor)>,
    /// `(m, v)` per parameter, in parameter order.
    pub adam: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

impl Checkpoint {
    pub fn capture(model: &Model, adam: Option<&AdamState>, state: TrainState) -> Self {
        let params: Vec<(String, Tensor)> = model
            .store
            .iter()
            .map(|(_, n, t)| (n.to_string(), Tensor::new(t.shape.clone(), t.data.clone()).expect("valid")))
            .collect();
        let mut tensors: Vec<TensorEntry> = params
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                slot: Slot::Param,
                shape: t.shape.clone(),
            })
            .collect();
        if adam.is_some() {
            for slot in [Slot::AdamM, Slot::AdamV] {
                tensors.extend(params.iter().map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    slot,
                    shape: t.shape.clone(),
                }));
            }
        }
        let mut state = state;
        if let Some(a) = adam {
            state.adam_step = a.step;
        }
        Self {
            meta: CheckpointMeta {
                model: model.arch.cfg.clone(),
                n_items: model.arch.n_items,
                state,
                tensors,
            },
            params,
            adam: adam.map(|a| (a.m.clone(), a.v.clone())),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let n: usize = self.meta.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        let mut out = Vec::with_capacity(20 + meta.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for (_, t) in &self.params {
            put(&t.data);
        }
        if let Some((m, v)) = &self.adam {
            m.iter().chain(v).for_each(|x| put(x));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        read_exact(&mut r, &mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        read_exact(&mut r, &mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        if len > r.len() {
            return Err(Error::Format("truncated metadata".into()));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &meta.tensors {
            let n: usize = e.shape.iter().product();
            if r.len() < 8 * n {
                return Err(Error::Format(format!("truncated tensor {}", e.name)));
            }
            let data: Vec<f64> = r[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            r = &r[8 * n..];
            match e.slot {
                Slot::Param => params.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?)),
                Slot::AdamM => m.push(data),
                Slot::AdamV => v.push(data),
            }
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        let adam = match (m.len(), v.len()) {
            (0, 0) => None,
            (a, b) if a == params.len() && b == params.len() => Some((m, v)),
            _ => return Err(Error::Format("incomplete optimizer state".into())),
        };
        Ok(Self { meta, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model; every parameter must be present.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.meta.model, self.meta.n_items, 0)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        model.store.load_from(&self.params)?;
        Ok(model)
    }

    /// Restores optimizer moments into `state` (which fixes the
    /// hyperparameters).
    pub fn restore_adam(&self, model: &Model, state: &mut AdamState) -> Result<()> {
        let Some((m, v)) = &self.adam else {
            return Err(Error::Format("checkpoint carries no optimizer state".into()));
        };
        for (i, (name, _)) in self.params.iter().enumerate() {
            if model.store.name(ParamId(i)) != name {
                return Err(Error::Format(format!("parameter order mismatch at {name}")));
            }
        }
        state.m.clone_from(m);
        state.v.clone_from(v);
        state.step = self.meta.state.adam_step;
        Ok(())
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))
}
