use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f64> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.params.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Moves every parameter of `other` into `self`, replacing duplicates.
    pub fn extend(&mut self, other: ParamStore<T>) {
        self.params.extend(other.params);
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Σ|a − b| over parameters present in both stores; `None` when the name
    /// sets or shapes differ.
    pub fn abs_diff(&self, other: &ParamStore<T>) -> Option<T> {
        if self.params.len() != other.params.len() {
            return None;
        }
        let mut total = T::zero();
        for ((ka, va), (kb, vb)) in self.params.iter().zip(&other.params) {
            if ka != kb || va.shape() != vb.shape() {
                return None;
            }
            for (&a, &b) in va.data().iter().zip(vb.data()) {
                total = total + (a - b).abs();
            }
        }
        Some(total)
    }
}

/// Lazily places parameters of a store on a tape.
pub struct Bound<'s, 't, T: Scalar = f64> {
    store: &'s ParamStore<T>,
    tape: &'t Tape<T>,
    trainable: bool,
    vars: RefCell<BTreeMap<String, Var<'t, T>>>,
}

impl<'s, 't, T: Scalar> Bound<'s, 't, T> {
    pub fn new(store: &'s ParamStore<T>, tape: &'t Tape<T>, trainable: bool) -> Self {
        Self {
            store,
            tape,
            trainable,
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let value = self.store.get(name)?.clone();
        let var = self.tape.leaf(value, self.trainable);
        self.vars.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }

    /// Gradients of every parameter that was used, keyed by name.
    pub fn collect(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .borrow()
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}
