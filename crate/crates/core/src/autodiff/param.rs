use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Owns every parameter of a model. Names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn grad_norm(&self) -> T {
        self.params.iter().map(|p| p.grad.squared_norm()).sum::<T>().sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: T) -> T {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let scale = max_norm / norm;
            for p in &mut self.params {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
        }
        norm
    }
}
