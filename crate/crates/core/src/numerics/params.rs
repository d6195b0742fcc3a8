use std::collections::{BTreeMap, BTreeSet};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter arrays. Ordered so that iteration (and thus checkpoint
/// layout and optimizer updates) is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
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

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Copies every entry of `other` into `self`, replacing same-named arrays.
    pub fn extend_from(&mut self, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.params.insert(k.clone(), v.clone());
        }
    }

    /// Names whose bit patterns differ between the two stores (including
    /// names present in only one of them).
    pub fn diff_names(&self, other: &ParamStore) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for (k, v) in &self.params {
            match other.params.get(k) {
                Some(w) if v.bit_eq(w) => {}
                _ => {
                    out.insert(k.clone());
                }
            }
        }
        for k in other.params.keys() {
            if !self.params.contains_key(k) {
                out.insert(k.clone());
            }
        }
        out
    }

    /// All names starting with any of the given prefixes.
    pub fn select_prefixed(&self, prefixes: &[&str]) -> TrainableSet {
        TrainableSet(
            self.params
                .keys()
                .filter(|k| prefixes.iter().any(|p| k.starts_with(p)))
                .cloned()
                .collect(),
        )
    }
}

/// Parameters that receive gradients and optimizer updates. Anything not
/// listed is frozen.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainableSet(pub BTreeSet<String>);

impl TrainableSet {
    pub fn all(store: &ParamStore) -> Self {
        Self(store.names().cloned().collect())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &String> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<String> for TrainableSet {
    fn from_iter<I: IntoIterator<Item = String>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}
