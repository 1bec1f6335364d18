//! Named parameter storage and the per-pass [`Graph`] that binds parameters to a tape.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Fault, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// Owns every learned tensor of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter `{name}`"
            )));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape().to_vec())?;
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    /// Glorot-uniform tensor in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_constant(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        value: f64,
    ) -> Result<ParamId> {
        self.add(name, Tensor::full(shape.to_vec(), value)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds per-parameter gradients (indexed by [`ParamId`]) into the stored grads.
    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                p.grad
                    .data_mut()
                    .iter_mut()
                    .zip(g)
                    .for_each(|(s, d)| *s += d);
            }
        }
    }

    /// Replaces every value with the matching entry of `other`, which must have
    /// identical names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter count mismatch: expected {}, got {}",
                self.len(),
                other.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(other.iter()) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// Gradients of one pass, indexed by [`ParamId`]; `None` for parameters the
/// pass never touched.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads(pub Vec<Option<Vec<f64>>>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0.get(id.0)?.as_deref()
    }

    /// Elementwise sum, used to reduce per-sample gradients in a fixed order.
    pub fn add_assign(&mut self, other: &ParamGrads) {
        if self.0.len() < other.0.len() {
            self.0.resize(other.0.len(), None);
        }
        for (dst, src) in self.0.iter_mut().zip(&other.0) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => d.iter_mut().zip(s).for_each(|(a, b)| *a += b),
                (None, Some(s)) => *dst = Some(s.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.0.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }
}

/// One forward pass: a tape plus lazily bound parameter leaves.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self::with_tape(store, Tape::new())
    }

    pub fn with_fault(store: &'a ParamStore, fault: Option<Fault>) -> Self {
        Self::with_tape(store, fault.map(Tape::with_fault).unwrap_or_default())
    }

    fn with_tape(store: &'a ParamStore, tape: Tape) -> Self {
        Graph {
            tape,
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The tape leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.variable(self.store.get(id).value.clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let mut grads: Gradients = self.tape.backward(loss)?;
        Ok(ParamGrads(
            self.bound
                .iter()
                .map(|b| b.and_then(|v| grads.take(v)))
                .collect(),
        ))
    }
}
