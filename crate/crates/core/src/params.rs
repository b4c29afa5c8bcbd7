//! Named parameter storage.
//!
//! Every learned tensor of the model lives in one [`ParamStore`] and is
//! addressed by a [`ParamId`]. Binding a store to a tape creates one
//! gradient-tracked leaf per parameter, in store order.

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor with a same-shaped one from `other`, matched by name.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        let mine: BTreeSet<&str> = self.names.iter().map(String::as_str).collect();
        let theirs: BTreeSet<&str> = other.names.iter().map(String::as_str).collect();
        if mine != theirs {
            let missing: Vec<_> = mine.symmetric_difference(&theirs).collect();
            return Err(Error::validation(
                "parameters",
                format!("name sets differ: {missing:?}"),
            ));
        }
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other.get(other.find(name).expect("checked above"));
            if src.shape() != slot.shape() {
                return Err(Error::validation(
                    format!("parameter {name}"),
                    format!("shape {:?}, expected {:?}", src.shape(), slot.shape()),
                ));
            }
            *slot = src.clone();
        }
        Ok(())
    }

    /// Creates one gradient leaf per parameter. Leaf `i` is `Var` index `i`
    /// when the tape starts empty.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        Bound { vars }
    }

    /// Same as [`bind`](Self::bind) but the leaves are constants.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        Bound { vars }
    }
}

/// Parameter leaves on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Collects the gradient of every parameter after `Tape::backward`;
    /// parameters that did not influence the loss get zeros.
    pub fn grads(&self, tape: &Tape, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

/// Glorot-uniform initialisation: `U(±√(6/(fan_in+fan_out)))` for a
/// `fan_out × fan_in` weight matrix.
pub fn glorot<R: Rng + ?Sized>(fan_out: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_out, fan_in], limit, rng)
}

/// Initialisation scheme recorded in checkpoint headers.
pub const INIT_SCHEME: &str = "glorot-uniform weights, zero biases, lstm forget-gate bias 1.0";
