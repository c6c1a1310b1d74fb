//! Named parameter store shared by the optimizer and the checkpoint format.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Model parameters addressed by name. Iteration order is the sorted name
/// order, which keeps optimizer updates and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Put a parameter on a tape as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape, name: &str) -> Result<Var<'t>> {
        Ok(tape.leaf(self.get(name)?.clone()))
    }
}

/// Memoizing tape binder: each parameter becomes exactly one leaf per
/// tape, and the name -> leaf mapping stays available for routing
/// gradients back to the optimizer.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    cache: std::cell::RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t, 's> Binder<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Binder { tape, store, cache: std::cell::RefCell::new(BTreeMap::new()) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn bind(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.cache.borrow().get(name) {
            return Ok(*v);
        }
        let v = self.store.bind(self.tape, name)?;
        self.cache.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Every parameter bound so far.
    pub fn bound(&self) -> Vec<(String, Var<'t>)> {
        self.cache.borrow().iter().map(|(k, &v)| (k.clone(), v)).collect()
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<T: IntoIterator<Item = (String, Tensor)>>(iter: T) -> Self {
        ParamStore { entries: iter.into_iter().collect() }
    }
}
