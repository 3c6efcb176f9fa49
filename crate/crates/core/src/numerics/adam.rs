use serde::{Deserialize, Serialize};

use super::{check_finite, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments and step counter for one parameter array.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub params: AdamParams,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize, params: AdamParams) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
            params,
        }
    }
}

/// Bias-corrected Adam update of `param` given moments at step `step`
/// (the step number after incrementing, so `step >= 1`).
///
/// Shared by the dense optimizer and the row-sparse memory optimizer.
pub fn adam_update_slice<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    hp: &AdamParams,
) {
    let b1 = T::c(hp.beta1);
    let b2 = T::c(hp.beta2);
    let one = T::one();
    let bc1 = T::c(1.0 - hp.beta1.powi(step as i32));
    let bc2 = T::c(1.0 - hp.beta2.powi(step as i32));
    let lr = T::c(hp.lr);
    let eps = T::c(hp.eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

pub fn adam_step<T: Scalar>(param: &mut [T], grad: &[T], state: &mut AdamState<T>) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() {
        return Err(Error::shape("adam_step", &[param.len()], &[grad.len(), state.m.len()]));
    }
    check_finite(grad, "adam gradient")?;
    state.step += 1;
    let step = state.step;
    let hp = state.params;
    adam_update_slice(param, grad, &mut state.m, &mut state.v, step, &hp);
    Ok(())
}
