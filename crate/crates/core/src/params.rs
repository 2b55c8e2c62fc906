//! Named parameter storage and the small layer helpers shared by every model.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Bcast, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters keyed by dotted names such as `encoder.stages.0.blocks.1.qkv.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Entries whose names start with `prefix`.
    pub fn with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a String, &'a Tensor)> {
        self.tensors
            .iter()
            .filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Copies every entry of `other` into `self`, replacing duplicates.
    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    pub fn num_scalars(&self, prefix: &str) -> usize {
        self.with_prefix(prefix).map(|(_, t)| t.numel()).sum()
    }
}

/// Initializers writing into a [`ParamStore`].
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    /// `weight: [in, out]` with std `gain / sqrt(in)`, zero bias.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        self.store.insert(
            format!("{prefix}.weight"),
            Tensor::randn(vec![fan_in, fan_out], std, self.rng),
        );
        self.store
            .insert(format!("{prefix}.bias"), Tensor::zeros(vec![fan_out]));
    }

    pub fn linear_no_bias(&mut self, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        self.store.insert(
            format!("{prefix}.weight"),
            Tensor::randn(vec![fan_in, fan_out], std, self.rng),
        );
    }

    pub fn layer_norm(&mut self, prefix: &str, width: usize) {
        self.store
            .insert(format!("{prefix}.gamma"), Tensor::full(vec![width], 1.0));
        self.store
            .insert(format!("{prefix}.beta"), Tensor::zeros(vec![width]));
    }

    pub fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64) {
        self.store
            .insert(name.to_string(), Tensor::randn(shape, std, self.rng));
    }

    pub fn constant(&mut self, name: &str, value: Tensor) {
        self.store.insert(name.to_string(), value);
    }
}

/// `x [n, in] · weight [in, out] + bias`.
pub fn linear(g: &mut Graph, ps: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(ps, &format!("{prefix}.weight"))?;
    let y = g.matmul(x, w)?;
    let b = g.param(ps, &format!("{prefix}.bias"))?;
    g.add_bcast(y, b, Bcast::Suffix)
}

pub fn linear_no_bias(g: &mut Graph, ps: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(ps, &format!("{prefix}.weight"))?;
    g.matmul(x, w)
}

pub fn layer_norm(g: &mut Graph, ps: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(ps, &format!("{prefix}.gamma"))?;
    let beta = g.param(ps, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta)
}
