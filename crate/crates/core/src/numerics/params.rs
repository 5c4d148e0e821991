use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{Real, Tensor};

/// Index of a parameter inside a [`ParameterSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter values. Forward passes borrow this immutably.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTable<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamTable<T> {
    fn new() -> Self {
        ParamTable {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }
}

/// Every learned tensor of a model together with its accumulated gradient.
///
/// Gradients always have the shape of their value and start out zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    table: ParamTable<T>,
    grads: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParameterSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            table: ParamTable::new(),
            grads: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.table.index.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = ParamId(self.table.values.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.table.values.push(value);
        self.table.index.insert(name.clone(), id);
        self.table.names.push(name);
        Ok(id)
    }

    pub fn table(&self) -> &ParamTable<T> {
        &self.table
    }

    /// Splits into the read-only values a graph borrows and the gradient buffers
    /// that backward passes accumulate into.
    pub fn parts_mut(&mut self) -> (&ParamTable<T>, &mut [Tensor<T>]) {
        (&self.table, &mut self.grads)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.table.id(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.table.name(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        self.table.ids()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        self.table.value(id)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.table.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
    }

    /// Total number of scalar components.
    pub fn num_scalars(&self) -> usize {
        self.table.values.iter().map(Tensor::len).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = T::of(max_norm / norm);
            for g in &mut self.grads {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
        }
        norm
    }

    /// Converts every value to another precision. Gradients are reset.
    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        let mut out = ParameterSet::new();
        for id in self.ids() {
            out.insert(self.name(id), self.value(id).cast())
                .expect("names are unique in the source set");
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.table
            .names
            .iter()
            .map(String::as_str)
            .zip(self.table.values.iter())
    }
}
