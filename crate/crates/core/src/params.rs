//! Named tensor container shared by the model, optimizer, checkpoints and
//! the finite-difference oracle.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::Matrix;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Arc<Matrix>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(Arc::new(value));
        ParamId(self.tensors.len() - 1)
    }

    /// Scaled-uniform initialization by fan-in: `U(-s, s)` with `s = gain / sqrt(rows)`.
    pub fn insert_uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> ParamId {
        let bound = gain / (rows.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Matrix::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn shared(&self, id: ParamId) -> Arc<Matrix> {
        Arc::clone(&self.tensors[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(|t| t.as_ref()))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Puts every tensor on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.parameter(Arc::clone(t))).collect(),
        }
    }

    /// Zero-filled gradient container with this store's shapes.
    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.tensors.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect()
    }

    /// Structural equality of names and shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// Tape handles for every tensor of a [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Adds this tape's parameter adjoints into `acc` (store order).
    pub fn accumulate(&self, grads: &Gradients, acc: &mut [Matrix]) {
        for (slot, v) in acc.iter_mut().zip(&self.vars) {
            if let Some(g) = grads.get(*v) {
                slot.add_assign(g);
            }
        }
    }
}
