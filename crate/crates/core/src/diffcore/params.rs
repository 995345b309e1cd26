use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named learnable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.id(name).is_some() {
            bail!(Contract, "duplicate parameter name {}", name);
        }
        self.names.push(name.to_string());
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
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

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces a tensor's contents, keeping its dims.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let Some(id) = self.id(name) else {
            bail!(Data, "unknown parameter {}", name);
        };
        if self.tensors[id.0].dims() != value.dims() {
            bail!(
                Data,
                "parameter {} has dims {:?}, got {:?}",
                name,
                self.tensors[id.0].dims(),
                value.dims()
            );
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Records every parameter as a leaf of `graph`; `trainable` decides which
    /// of them receive gradients.
    pub fn bind(&self, graph: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| graph.leaf(t.clone(), trainable(n)))
            .collect();
        Bound { vars }
    }
}

/// Graph handles for every parameter of a store.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in store order; zeros for parameters nothing flowed into.
    pub fn grads(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.take(*v)).collect()
    }
}

/// Uniform initialization in `±gain * sqrt(3 / fan_in)`.
pub fn fan_in_uniform<R: rand::Rng + ?Sized>(dims: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    let bound = gain * crate::math::sqrt(3.0 / fan_in.max(1) as f64);
    Tensor::from_fn(dims, |_| rng.gen_range(-bound..=bound))
}

/// Destination of named parameters during model construction.
pub trait ParamSink {
    fn param(&mut self, name: &str, init: Tensor) -> Result<ParamId>;
}

impl ParamSink for ParamStore {
    fn param(&mut self, name: &str, init: Tensor) -> Result<ParamId> {
        self.add(name, init)
    }
}

/// Resolves parameters by name in an existing store, ignoring the initial
/// values; used to rebuild model handles after loading a checkpoint.
pub struct Attach<'a>(pub &'a ParamStore);

impl ParamSink for Attach<'_> {
    fn param(&mut self, name: &str, init: Tensor) -> Result<ParamId> {
        let Some(id) = self.0.id(name) else {
            bail!(Config, "missing parameter {}", name);
        };
        if self.0.get(id).dims() != init.dims() {
            bail!(
                Config,
                "parameter {} has dims {:?}, expected {:?}",
                name,
                self.0.get(id).dims(),
                init.dims()
            );
        }
        Ok(id)
    }
}
