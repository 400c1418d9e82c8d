//! Named parameter storage and the Adam optimiser.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    frozen: bool,
}

/// An ordered collection of named parameter tensors.
///
/// Insertion order is stable and defines the on-disk order in checkpoints.
/// Names are dotted paths with a network prefix (`denoiser.`, `amn.`,
/// `acn.`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            frozen: false,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn name(&self, id: usize) -> &str {
        &self.entries[id].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.entries.iter().any(|e| e.name.starts_with(prefix))
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let id = self.id(name)?;
        self.entries[id].frozen = frozen;
        Ok(())
    }

    pub fn is_frozen(&self, id: usize) -> bool {
        self.entries[id].frozen
    }

    /// Adds `N(0, scale²)` noise to every non-frozen entry.
    pub fn jitter<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        for e in self.entries.iter_mut().filter(|e| !e.frozen) {
            let noise = Tensor::randn(e.value.shape().to_vec(), rng);
            for (v, n) in e.value.data_mut().iter_mut().zip(noise.data()) {
                *v += scale * n;
            }
        }
    }
}

/// Adam with bias correction, no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .entries
            .iter()
            .map(|e| vec![0.0; e.value.len()])
            .collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` is indexed by parameter id; `None` entries
    /// and frozen parameters are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            if store.is_frozen(id) {
                continue;
            }
            let m = &mut self.first[id];
            let v = &mut self.second[id];
            let value = store.value_mut(id).data_mut();
            for (i, &g) in grad.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                value[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new([2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut opt = Adam::new(&store, 0.1);
        let g = Tensor::new([2], vec![3.0, -0.5]).unwrap();
        opt.step(&mut store, &[Some(g)]);
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros([3])).unwrap();
        store.set_frozen("w", true).unwrap();
        let mut opt = Adam::new(&store, 0.1);
        opt.step(&mut store, &[Some(Tensor::full([3], 1.0))]);
        assert_eq!(store.get("w").unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::zeros([1])).unwrap();
        assert!(store.insert("a", Tensor::zeros([1])).is_err());
    }
}
