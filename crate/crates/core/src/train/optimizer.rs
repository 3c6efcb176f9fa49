use std::collections::BTreeMap;

use crate::error::Result;
use crate::numerics::{adam_step, AdamParams, AdamState, Scalar};
use crate::params::{Gradients, ParamKind, Parameters};
use crate::pkm::{sparse_value_update, SparseAdamState, SparseOptimizerKind};

/// Dense Adam for ordinary parameters, row-sparse updates for memory values.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    params: AdamParams,
    sparse_kind: SparseOptimizerKind,
    dense: BTreeMap<String, AdamState<T>>,
    sparse: BTreeMap<String, SparseAdamState<T>>,
    frozen: Vec<String>,
}

/// Value rows written by one optimizer step, per value table.
pub type TouchedRows = BTreeMap<String, Vec<usize>>;

impl<T: Scalar> Optimizer<T> {
    pub fn new(params: AdamParams, sparse_kind: SparseOptimizerKind) -> Self {
        Self {
            params,
            sparse_kind,
            dense: BTreeMap::new(),
            sparse: BTreeMap::new(),
            frozen: Vec::new(),
        }
    }

    /// Parameters whose name contains `pattern` are never updated.
    pub fn freeze(&mut self, pattern: &str) {
        self.frozen.push(pattern.to_string());
    }

    pub fn step<P: Parameters<T> + ?Sized>(
        &mut self,
        model: &mut P,
        grads: &Gradients<T>,
        lr: f64,
        memory_lr: f64,
    ) -> Result<TouchedRows> {
        let mut touched = TouchedRows::new();
        let mut result = Ok(());
        let hp = AdamParams { lr, ..self.params };
        let frozen = self.frozen.clone();
        let is_frozen = |n: &str| frozen.iter().any(|p| n.contains(p.as_str()));
        model.visit_mut("", &mut |name, kind, tensor| {
            if result.is_err() || is_frozen(name) {
                return;
            }
            match kind {
                ParamKind::Dense => {
                    if let Some(g) = grads.dense.get(name) {
                        let st = self
                            .dense
                            .entry(name.to_string())
                            .or_insert_with(|| AdamState::new(tensor.len(), hp));
                        st.params = hp;
                        result = adam_step(tensor.data_mut(), g.data(), st);
                    }
                }
                ParamKind::MemoryValues => {
                    if let Some(g) = grads.sparse.get(name) {
                        let (rows, dim) = (tensor.rows(), tensor.cols());
                        let st = self
                            .sparse
                            .entry(name.to_string())
                            .or_insert_with(|| SparseAdamState::new(rows, dim, self.sparse_kind, self.params));
                        result = sparse_value_update(tensor, g, st, memory_lr);
                        touched.insert(name.to_string(), g.rows.clone());
                    }
                }
                ParamKind::Buffer => {}
            }
        });
        result.map(|_| touched)
    }
}
