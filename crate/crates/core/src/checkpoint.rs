//! Versioned binary checkpoint container.
//!
//! Layout (little-endian): magic `HCKP`, `u32` version, `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u32` rank, `rank` x `u32`
//! dims and an `f32` row-major payload; finally `u32` length plus a JSON
//! metadata trailer. Optimizer moments are stored as extra tensors named
//! `optim.m/<param>` and `optim.v/<param>`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::model::{HiccapModel, ModelConfig, Task};
use crate::optim::{AdamW, MomentState};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// SHA-256 of the canonical JSON form of a model config.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    format!("{:x}", Sha256::digest(json.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Per-parameter step counts, keyed by parameter name.
    pub steps: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_config: ModelConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub task: Option<Task>,
    #[serde(default)]
    pub metrics: serde_json::Value,
    pub optimizer: Option<OptimizerSnapshot>,
    pub rng_scheme: String,
}

impl CheckpointMeta {
    pub fn new(model: &HiccapModel, epoch: usize, task: Option<Task>) -> Self {
        Self {
            model_config: model.config.clone(),
            config_hash: config_hash(&model.config),
            epoch,
            task,
            metrics: serde_json::Value::Null,
            optimizer: None,
            rng_scheme: crate::rng::RNG_SCHEME.to_string(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: HiccapModel,
    pub optimizer: Option<AdamW>,
    pub meta: CheckpointMeta,
}

fn tensors_of(store: &ParamStore, optim: Option<&AdamW>) -> Vec<(String, Matrix)> {
    let mut out: Vec<(String, Matrix)> = store
        .ids()
        .map(|id| (store.name(id).to_string(), store.get(id).clone()))
        .collect();
    if let Some(opt) = optim {
        for id in store.ids() {
            if let Some(Some(st)) = opt.state.get(id.index()) {
                out.push((format!("optim.m/{}", store.name(id)), st.m.clone()));
                out.push((format!("optim.v/{}", store.name(id)), st.v.clone()));
            }
        }
    }
    out
}

pub fn write_checkpoint(
    w: &mut impl Write,
    model: &HiccapModel,
    optim: Option<&AdamW>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut meta = meta.clone();
    meta.model_config = model.config.clone();
    meta.config_hash = config_hash(&model.config);
    meta.optimizer = optim.map(|o| OptimizerSnapshot {
        lr: o.lr,
        weight_decay: o.weight_decay,
        betas: o.betas,
        eps: o.eps,
        steps: model
            .store
            .ids()
            .filter_map(|id| match o.state.get(id.index()) {
                Some(Some(st)) => Some((model.store.name(id).to_string(), st.step)),
                _ => None,
            })
            .collect(),
    });
    let tensors = tensors_of(&model.store, optim);
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
        for v in t.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let json = serde_json::to_vec(&meta).map_err(|e| Error::json("checkpoint metadata", e))?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    w.write_all(&buf).map_err(|e| Error::io("<checkpoint>", e))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut data = Vec::new();
    r.read_to_end(&mut data).map_err(|e| Error::io("<checkpoint>", e))?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = c.u32()? as usize;
    let mut tensors: BTreeMap<String, Matrix> = BTreeMap::new();
    for _ in 0..n {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        if rank != 2 {
            return Err(Error::Checkpoint(format!("{name}: rank {rank} unsupported")));
        }
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let bytes = c.take(rows * cols * 4)?;
        let vals: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let m = Matrix::from_shape_vec((rows, cols), vals).expect("sized payload");
        if tensors.insert(name.clone(), m).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    let len = c.u32()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(c.take(len)?).map_err(|e| Error::json("checkpoint metadata", e))?;
    if c.pos != data.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    if config_hash(&meta.model_config) != meta.config_hash {
        return Err(Error::Checkpoint("config hash does not match stored config".into()));
    }

    let mut model = HiccapModel::new(meta.model_config.clone(), 0)?;
    let ids: Vec<_> = model.store.ids().collect();
    for id in &ids {
        let name = model.store.name(*id).to_string();
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        model
            .store
            .set(*id, t)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    let optimizer = match &meta.optimizer {
        None => None,
        Some(snap) => {
            let mut state = vec![None; model.store.len()];
            for id in &ids {
                let name = model.store.name(*id);
                if let Some(&step) = snap.steps.get(name) {
                    let m = tensors.remove(&format!("optim.m/{name}"));
                    let v = tensors.remove(&format!("optim.v/{name}"));
                    match (m, v) {
                        (Some(m), Some(v)) => state[id.index()] = Some(MomentState { m, v, step }),
                        _ => return Err(Error::Checkpoint(format!("missing optimizer moments for {name}"))),
                    }
                }
            }
            Some(AdamW {
                lr: snap.lr,
                weight_decay: snap.weight_decay,
                betas: snap.betas,
                eps: snap.eps,
                state,
            })
        }
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint { model, optimizer, meta })
}

pub fn save_checkpoint(path: &Path, model: &HiccapModel, optim: Option<&AdamW>, meta: &CheckpointMeta) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model, optim, meta)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut f)
}
