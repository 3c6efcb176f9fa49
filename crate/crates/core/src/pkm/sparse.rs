use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{adam_update_slice, check_finite, AdamParams, Scalar, Tensor};

/// Gradient of a row-indexed table restricted to a set of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows<T> {
    /// Sorted, unique row indices.
    pub rows: Vec<usize>,
    /// `rows.len() × dim` gradient entries, in `rows` order.
    pub grads: Vec<T>,
    pub dim: usize,
}

impl<T: Scalar> SparseRows<T> {
    pub fn empty(dim: usize) -> Self {
        Self {
            rows: Vec::new(),
            grads: Vec::new(),
            dim,
        }
    }

    pub fn row_grad(&self, i: usize) -> &[T] {
        &self.grads[i * self.dim..(i + 1) * self.dim]
    }

    /// Dense `[n_rows × dim]` copy, zero outside the touched rows.
    pub fn to_dense(&self, n_rows: usize) -> Tensor<T> {
        let mut t = Tensor::zeros(&[n_rows, self.dim]);
        for (i, &r) in self.rows.iter().enumerate() {
            t.row_mut(r).copy_from_slice(self.row_grad(i));
        }
        t
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparseOptimizerKind {
    /// Adam with moments and step counter local to each row.
    #[default]
    Adam,
    /// Plain SGD on the touched rows.
    Sgd,
}

/// Optimizer state for a memory value table.
///
/// Each row carries its own moments and its own step counter, so a row's
/// trajectory only depends on the steps in which it was selected.
#[derive(Clone, Debug)]
pub struct SparseAdamState<T> {
    pub kind: SparseOptimizerKind,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub steps: Vec<u64>,
    pub dim: usize,
    pub params: AdamParams,
}

impl<T: Scalar> SparseAdamState<T> {
    pub fn new(rows: usize, dim: usize, kind: SparseOptimizerKind, params: AdamParams) -> Self {
        let moments = if kind == SparseOptimizerKind::Adam { rows * dim } else { 0 };
        Self {
            kind,
            m: vec![T::zero(); moments],
            v: vec![T::zero(); moments],
            steps: vec![0; rows],
            dim,
            params,
        }
    }
}

/// Updates only the rows listed in `grads`, leaving every other row of
/// `values` and of the optimizer state untouched.
pub fn sparse_value_update<T: Scalar>(
    values: &mut Tensor<T>,
    grads: &SparseRows<T>,
    state: &mut SparseAdamState<T>,
    lr: f64,
) -> Result<()> {
    let n_rows = values.rows();
    let dim = values.cols();
    if grads.dim != dim || state.dim != dim || state.steps.len() != n_rows {
        return Err(Error::shape("sparse_value_update", &[n_rows, dim], &[state.steps.len(), grads.dim]));
    }
    if let Some(&r) = grads.rows.iter().find(|&&r| r >= n_rows) {
        return Err(Error::RowOutOfRange { row: r, rows: n_rows });
    }
    check_finite(&grads.grads, "memory value gradient")?;
    let hp = AdamParams { lr, ..state.params };
    for (i, &r) in grads.rows.iter().enumerate() {
        let g = grads.row_grad(i);
        let p = &mut values.data_mut()[r * dim..(r + 1) * dim];
        state.steps[r] += 1;
        match state.kind {
            SparseOptimizerKind::Adam => {
                let m = &mut state.m[r * dim..(r + 1) * dim];
                let v = &mut state.v[r * dim..(r + 1) * dim];
                adam_update_slice(p, g, m, v, state.steps[r], &hp);
            }
            SparseOptimizerKind::Sgd => {
                let lr = T::c(lr);
                for (pj, &gj) in p.iter_mut().zip(g) {
                    *pj -= lr * gj;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{adam_step, rng_from_seed, AdamState};

    fn table(seed: u64) -> Tensor<f32> {
        Tensor::randn(&[6, 3], 1.0, &mut rng_from_seed(seed))
    }

    #[test]
    fn empty_update_is_noop() {
        let mut v = table(1);
        let before = v.clone();
        let mut st = SparseAdamState::new(6, 3, SparseOptimizerKind::Adam, AdamParams::default());
        sparse_value_update(&mut v, &SparseRows::empty(3), &mut st, 1e-3).unwrap();
        assert_eq!(v, before);
        assert!(st.steps.iter().all(|&s| s == 0));
    }

    #[test]
    fn single_row_matches_dense_adam_on_that_row() {
        let mut v = table(2);
        let grads = SparseRows {
            rows: vec![4],
            grads: vec![0.5, -1.0, 2.0],
            dim: 3,
        };
        let mut st = SparseAdamState::new(6, 3, SparseOptimizerKind::Adam, AdamParams::default());
        let mut row = v.row(4).to_vec();
        let mut dense = AdamState::new(3, AdamParams { lr: 1e-3, ..AdamParams::default() });
        for _ in 0..3 {
            sparse_value_update(&mut v, &grads, &mut st, 1e-3).unwrap();
            adam_step(&mut row, &grads.grads, &mut dense).unwrap();
        }
        assert_eq!(v.row(4), row.as_slice());
    }

    #[test]
    fn untouched_rows_and_moments_bit_identical() {
        let mut v = table(3);
        let before = v.clone();
        let mut st = SparseAdamState::new(6, 3, SparseOptimizerKind::Adam, AdamParams::default());
        let grads = SparseRows {
            rows: vec![1, 5],
            grads: vec![1.0; 6],
            dim: 3,
        };
        sparse_value_update(&mut v, &grads, &mut st, 1e-2).unwrap();
        for r in [0, 2, 3, 4] {
            assert_eq!(v.row(r), before.row(r));
            assert!(st.m[r * 3..r * 3 + 3].iter().all(|&x| x == 0.0));
            assert_eq!(st.steps[r], 0);
        }
        for r in [1, 5] {
            assert_ne!(v.row(r), before.row(r));
        }
    }

    #[test]
    fn out_of_range_row_rejected() {
        let mut v = table(4);
        let mut st = SparseAdamState::new(6, 3, SparseOptimizerKind::Sgd, AdamParams::default());
        let grads = SparseRows {
            rows: vec![6],
            grads: vec![0.0; 3],
            dim: 3,
        };
        assert!(matches!(
            sparse_value_update(&mut v, &grads, &mut st, 0.1),
            Err(Error::RowOutOfRange { row: 6, rows: 6 })
        ));
    }

    #[test]
    fn sgd_fallback() {
        let mut v = Tensor::<f32>::zeros(&[2, 2]);
        let mut st = SparseAdamState::new(2, 2, SparseOptimizerKind::Sgd, AdamParams::default());
        let grads = SparseRows {
            rows: vec![1],
            grads: vec![1.0, -2.0],
            dim: 2,
        };
        sparse_value_update(&mut v, &grads, &mut st, 0.5).unwrap();
        assert_eq!(v.data(), &[0.0, 0.0, -0.5, 1.0]);
    }
}
