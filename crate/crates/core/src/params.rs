//! Named parameter traversal shared by the optimizer, grafting and checkpoints.

use std::collections::BTreeMap;

use crate::numerics::{Scalar, Tensor};
use crate::pkm::SparseRows;

/// Role of a named tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained by the dense optimizer.
    Dense,
    /// Memory value table, trained by row-sparse updates only.
    MemoryValues,
    /// Non-trainable state (batch-norm running statistics).
    Buffer,
}

pub trait Parameters<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Gradients of one backward pass, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub dense: BTreeMap<String, Tensor<T>>,
    pub sparse: BTreeMap<String, SparseRows<T>>,
}

impl<T> Default for Gradients<T> {
    fn default() -> Self {
        Self {
            dense: BTreeMap::new(),
            sparse: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn insert(&mut self, prefix: &str, name: &str, g: Tensor<T>) {
        self.dense.insert(join(prefix, name), g);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.dense.get(name)
    }
}

/// Every named tensor in visiting order.
pub fn named_tensors<T: Clone, P: Parameters<T> + ?Sized>(p: &P) -> Vec<(String, ParamKind, Tensor<T>)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, kind, t| out.push((name.to_string(), kind, t.clone())));
    out
}

pub fn get_param<T: Clone, P: Parameters<T> + ?Sized>(p: &P, name: &str) -> Option<Tensor<T>> {
    let mut found = None;
    p.visit("", &mut |n, _, t| {
        if n == name {
            found = Some(t.clone());
        }
    });
    found
}

/// Applies `f` to the tensor called `name`; returns whether it exists.
pub fn with_param_mut<T, P: Parameters<T> + ?Sized>(p: &mut P, name: &str, mut f: impl FnMut(&mut Tensor<T>)) -> bool {
    let mut hit = false;
    p.visit_mut("", &mut |n, _, t| {
        if n == name {
            f(t);
            hit = true;
        }
    });
    hit
}
