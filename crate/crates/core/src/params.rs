//! Named parameter tensors with deterministic initialization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Learnable tensors keyed by a dotted name such as `dafm.ifam.w_q`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamBundle {
    pub rng_seed: u64,
    tensors: BTreeMap<String, Tensor>,
}

impl ParamBundle {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            rng_seed,
            tensors: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| invalid(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| invalid(format!("missing parameter `{name}`")))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same names and shapes, every value zero.
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors.values_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }

    /// Moves every entry of `other` into this bundle.
    pub fn merge(&mut self, other: ParamBundle) {
        self.tensors.extend(other.tensors);
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            rng_seed: self.rng_seed,
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

/// Fills a [`ParamBundle`] in a fixed call order from one seeded stream.
#[derive(Debug)]
pub struct ParamBuilder {
    rng: SplitMix64,
    bundle: ParamBundle,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: SplitMix64::new(seed),
            bundle: ParamBundle::new(seed),
        }
    }

    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.uniform(-bound, bound))?;
        self.put(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.put(name, Tensor::zeros(shape)?)
    }

    pub fn tensor(&mut self, name: &str, t: Tensor) -> Result<()> {
        self.put(name, t)
    }

    /// Conv weights `[cout, cin, k, k]` and bias `[cout]` named `{prefix}.w` / `{prefix}.b`.
    pub fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Result<()> {
        let fan_in = cin * k * k;
        self.uniform(&format!("{prefix}.w"), &[cout, cin, k, k], fan_in)?;
        if bias {
            self.uniform(&format!("{prefix}.b"), &[cout], fan_in)?;
        }
        Ok(())
    }

    fn put(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.bundle.insert(name, t).is_some() {
            return Err(invalid(format!("parameter `{name}` declared twice")));
        }
        Ok(())
    }

    pub fn finish(self) -> ParamBundle {
        self.bundle
    }
}
