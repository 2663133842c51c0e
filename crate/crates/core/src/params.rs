//! Named parameter collections shared by the optimizer and checkpoint code.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered list of named trainable tensors. Order is fixed at construction
/// and determines optimizer buffer indices and checkpoint layout.
pub struct ParamSet<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.entries.push((name.into(), t));
    }

    pub fn extend(&mut self, prefix: &str, other: ParamSet<S>) {
        for (name, t) in other.entries {
            self.entries.push((format!("{prefix}.{name}"), t));
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> Vec<Tensor<S>> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn zero_grad(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// Snapshot of all values, in registry order.
    pub fn snapshot(&self) -> Vec<Vec<S>> {
        self.entries.iter().map(|(_, t)| t.data()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<S>]) {
        assert_eq!(snapshot.len(), self.entries.len());
        for ((_, t), vals) in self.entries.iter().zip(snapshot) {
            t.set_data(vals);
        }
    }
}
