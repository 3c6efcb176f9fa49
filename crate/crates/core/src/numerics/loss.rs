use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Mean cross-entropy over the rows selected by `active`.
///
/// `logits` is `[n × V]`. Rows with `active[i] == false` contribute neither
/// loss nor gradient and their targets are not inspected. Returns the loss in
/// `f64` and the gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    active: &[bool],
) -> Result<(f64, Tensor<T>)> {
    let (n, v) = (logits.rows(), logits.cols());
    if targets.len() != n || active.len() != n {
        return Err(Error::shape("softmax_cross_entropy", &[n], &[targets.len(), active.len()]));
    }
    let count = active.iter().filter(|&&a| a).count();
    if count == 0 {
        return Err(Error::EmptyTargets);
    }
    let scale = T::c(1.0 / count as f64);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0f64;
    for i in 0..n {
        if !active[i] {
            continue;
        }
        let t = targets[i];
        if t >= v {
            return Err(Error::TargetOutOfRange { target: t, classes: v });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let g = grad.row_mut(i);
        let mut sum = T::zero();
        for (gj, &l) in g.iter_mut().zip(row) {
            *gj = (l - max).exp();
            sum += *gj;
        }
        let log_z = sum.ln() + max;
        total += (log_z - row[t]).to_f64().unwrap_or(f64::NAN);
        for gj in g.iter_mut() {
            *gj = *gj / sum * scale;
        }
        g[t] -= scale;
    }
    let loss = total / count as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, grad))
}
