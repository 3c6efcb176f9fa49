use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SMOOTHING: f64 = 1e-8;

/// Normalized top-1 usage distribution of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassUsage {
    pub p: Vec<f64>,
}

impl ClassUsage {
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyClass("no top-1 selections"));
        }
        Ok(Self {
            p: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        })
    }

    pub fn from_weights(p: &[f64]) -> Result<Self> {
        let total: f64 = p.iter().sum();
        if total <= 0.0 || p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::EmptyClass("distribution has no mass"));
        }
        Ok(Self {
            p: p.iter().map(|v| v / total).collect(),
        })
    }
}

fn smoothed(p: &[f64]) -> Vec<f64> {
    let z = 1.0 + SMOOTHING * p.len() as f64;
    p.iter().map(|v| (v + SMOOTHING) / z).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| a * (a / b).ln()).sum()
}

/// `(½(KL(t⁺‖t⁻) + KL(t⁻‖t⁺)), IOU)` of two class-conditional usage distributions.
pub fn class_divergence(pos: &ClassUsage, neg: &ClassUsage) -> Result<(f64, f64)> {
    if pos.p.len() != neg.p.len() {
        return Err(Error::SlotCountMismatch {
            index: 1,
            expected: pos.p.len(),
            got: neg.p.len(),
        });
    }
    if pos.p.is_empty() {
        return Err(Error::EmptyClass("zero slots"));
    }
    let (a, b) = (smoothed(&pos.p), smoothed(&neg.p));
    let sym = (0.5 * (kl(&a, &b) + kl(&b, &a))).max(0.0);
    let (mut inter, mut union) = (0.0, 0.0);
    for (&x, &y) in pos.p.iter().zip(&neg.p) {
        inter += x.min(y);
        union += x.max(y);
    }
    Ok((sym, inter / union))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_disjoint() {
        let p = ClassUsage::from_counts(&[3, 1, 0, 4]).unwrap();
        let (k, iou) = class_divergence(&p, &p).unwrap();
        assert!(k.abs() < 1e-12);
        assert_eq!(iou, 1.0);
        let a = ClassUsage::from_counts(&[1, 0]).unwrap();
        let b = ClassUsage::from_counts(&[0, 1]).unwrap();
        let (k, iou) = class_divergence(&a, &b).unwrap();
        assert_eq!(iou, 0.0);
        assert!(k > 10.0);
    }

    #[test]
    fn worked_iou() {
        let a = ClassUsage::from_counts(&[2, 0]).unwrap();
        let b = ClassUsage::from_counts(&[1, 1]).unwrap();
        let (_, iou) = class_divergence(&a, &b).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_side_rejected() {
        assert!(ClassUsage::from_counts(&[0, 0]).is_err());
        assert!(ClassUsage::from_weights(&[0.0, 0.0]).is_err());
    }
}
