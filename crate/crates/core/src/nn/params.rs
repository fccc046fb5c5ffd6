use std::collections::HashMap;

use super::tensor::Tensor;

/// Handle to a tensor owned by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors and their gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    trainable: Vec<bool>,
    decay: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. `decay` marks it for decoupled weight decay.
    ///
    /// Panics on duplicate names; parameter layout is fixed by the model code.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.rows(), value.cols()));
        self.values.push(value);
        self.trainable.push(true);
        self.decay.push(decay);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    /// Returns how many parameters matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (i, name) in self.names.iter().enumerate() {
            if name.starts_with(prefix) {
                self.trainable[i] = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) {
        self.grads[id.0].add_assign(grad);
    }

    /// Global l2 norm over the gradients of trainable parameters.
    pub fn grad_norm(&self) -> f64 {
        self.ids()
            .filter(|&id| self.is_trainable(id))
            .map(|id| self.grads[id.0].sum_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// l2 norm of the gradients of parameters under `prefix`.
    pub fn grad_norm_prefix(&self, prefix: &str) -> f64 {
        self.ids()
            .filter(|&id| self.names[id.0].starts_with(prefix))
            .map(|id| self.grads[id.0].sum_sq())
            .sum::<f64>()
            .sqrt()
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }

    /// Copies values from `other` for every name both stores share with
    /// equal shapes. Returns the names that were copied.
    pub fn copy_matching_from(&mut self, other: &ParamStore) -> Vec<String> {
        let mut copied = Vec::new();
        for id in other.ids() {
            let name = other.name(id);
            if let Some(mine) = self.id(name) {
                if self.values[mine.0].shape() == other.value(id).shape() {
                    self.values[mine.0] = other.value(id).clone();
                    copied.push(name.to_string());
                }
            }
        }
        copied
    }
}
