use std::collections::HashMap;

use crate::Tensor;

/// Insertion-ordered map from leaf names to tensors.
///
/// Used both for leaf bindings handed to [`crate::evaluate`] and for the
/// gradients returned by [`crate::backward`]. Iteration order is the order of
/// first insertion, which makes serialization and optimizer updates
/// deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorMap {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`. Replacement keeps the original position.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = tensor,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(tensor);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar entries across all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copies every entry of `other` into `self`, replacing same-named ones.
    pub fn extend_from(&mut self, other: &TensorMap) {
        for (name, t) in other.iter() {
            self.insert(name, t.clone());
        }
    }
}

impl<S: Into<String>> FromIterator<(S, Tensor)> for TensorMap {
    fn from_iter<I: IntoIterator<Item = (S, Tensor)>>(iter: I) -> Self {
        let mut map = TensorMap::new();
        for (name, t) in iter {
            map.insert(name, t);
        }
        map
    }
}
