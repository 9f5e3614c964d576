//! Named parameter storage and gradient accumulation.

use std::collections::HashMap;

use crate::graph::Gradients;
use crate::tensor::{Tensor, TensorError};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Parameters in insertion order, addressable by id or unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Invalid(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(id)
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.ids().map(|id| (id, self.name(id), self.get(id)))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<(), TensorError> {
        let cur = &self.tensors[id.0];
        if cur.shape() != value.shape() {
            return Err(TensorError::Shape {
                op: "set",
                lhs: cur.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (_, name, t) in self.iter() {
            let data = t.data().iter().map(|v| T::lit(v.as_f64())).collect();
            out.add(name, Tensor::new(t.shape().to_vec(), data).expect("same shape"))
                .expect("names unique");
        }
        out
    }
}

/// Anything that owns a parameter store.
pub trait Parameterized<S: Scalar> {
    fn params(&self) -> &ParamStore<S>;
    fn params_mut(&mut self) -> &mut ParamStore<S>;
}

impl<S: Scalar> Parameterized<S> for ParamStore<S> {
    fn params(&self) -> &ParamStore<S> {
        self
    }

    fn params_mut(&mut self) -> &mut ParamStore<S> {
        self
    }
}

/// Running sum of parameter gradients across samples.
#[derive(Clone, Debug)]
pub struct GradBuffer<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> GradBuffer<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, g: &Gradients<S>) {
        for id in g.bound_params() {
            if let Some(t) = g.param(id) {
                match &mut self.grads[id.0] {
                    Some(acc) => acc.add_assign(t),
                    slot @ None => *slot = Some(t.clone()),
                }
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    pub fn scale(&mut self, k: S) {
        for t in self.grads.iter_mut().flatten() {
            t.scale_assign(k);
        }
    }

    pub fn global_norm(&self) -> S {
        self.grads.iter().flatten().map(Tensor::sq_norm).sum::<S>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip(&mut self, max_norm: f64) -> S {
        let norm = self.global_norm();
        let max = S::lit(max_norm);
        if norm > max && norm > S::zero() {
            self.scale(max / norm);
        }
        norm
    }

    pub fn clear(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }
}
