//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `SINETCKP`, format version (u32), header
//! length (u32), UTF-8 JSON header, optimizer step (u64), parameter count
//! (u32), then per parameter its name, rank (u32), dims (u64 each) and f64
//! data. ADAM first and second moments follow, in parameter order, with the
//! parameter's shape.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{put_str, put_u32, Reader, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamStore, INIT_SCHEME};
use crate::tensor::Tensor;
use crate::trainer::{Adam, AdamHyper, Plateau, TrainConfig, TrainOutcome};

pub const MAGIC: &[u8; 8] = b"SINETCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub init_scheme: String,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub vocab: Vocabulary,
    pub epochs: usize,
    pub plateau: Plateau,
    pub adam: AdamHyper,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    pub store: ParamStore,
    pub adam: Adam,
}

impl Checkpoint {
    pub fn from_outcome(outcome: &TrainOutcome) -> Self {
        Self {
            header: Header {
                init_scheme: INIT_SCHEME.to_string(),
                train_config: outcome.config.clone(),
                model_config: outcome.model.config.clone(),
                vocab: outcome.vocab.clone(),
                epochs: outcome.log.len(),
                plateau: outcome.plateau.clone(),
                adam: outcome.adam.hyper,
            },
            store: outcome.model.store.clone(),
            adam: outcome.adam.clone(),
        }
    }

    /// Rebuilds the model; parameter names and shapes must match the config.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::init(self.header.model_config.clone(), self.header.train_config.seed)?;
        model.store.load_from(&self.store)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let header = serde_json::to_vec(&self.header)?;
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        put_u32(&mut out, self.store.len() as u32);
        for (name, t) in self.store.iter() {
            put_str(&mut out, name);
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            put_f64s(&mut out, m.data());
            put_f64s(&mut out, v.data());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(r.error_at(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error_at(8, format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let t = Tensor::new(shape, r.f64s(numel)?)?;
            store.insert(name, t)?;
        }
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for t in store.tensors() {
            m.push(Tensor::new(t.shape().to_vec(), r.f64s(t.numel())?)?);
            v.push(Tensor::new(t.shape().to_vec(), r.f64s(t.numel())?)?);
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, "trailing bytes after checkpoint"));
        }
        let adam = Adam {
            hyper: header.adam,
            step,
            m,
            v,
        };
        Ok(Self { header, store, adam })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_bytes()?).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}
