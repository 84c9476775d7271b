use std::ops::Index;

use sha2::{Digest, Sha256};

use super::graph::Var;
use super::tensor::Tensor;
use crate::error::{bail, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors owned by one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, S::one()))
    }

    /// Uniform in `±1/sqrt(fan_in)` where fan-in is `shape[0]`.
    pub fn fan_in_uniform(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut RngStream) -> ParamId {
        let bound = 1.0 / (shape[0] as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| S::of(rng.uniform_range(-bound, bound)));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.tensors.iter()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.tensors.iter_mut()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces values by name; every name and shape must match.
    pub fn load_named(&mut self, blobs: &[(String, Tensor<S>)]) -> Result<()> {
        if blobs.len() != self.tensors.len() {
            bail!(Data, "expected {} parameters, found {}", self.tensors.len(), blobs.len());
        }
        for (name, t) in blobs {
            let Some(i) = self.names.iter().position(|n| n == name) else {
                bail!(Data, "unknown parameter {name:?}");
            };
            if self.tensors[i].shape() != t.shape() {
                bail!(
                    Data,
                    "parameter {name:?}: expected shape {:?}, found {:?}",
                    self.tensors[i].shape(),
                    t.shape()
                );
            }
            self.tensors[i] = t.clone();
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and f64 bit patterns.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Graph leaves for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
