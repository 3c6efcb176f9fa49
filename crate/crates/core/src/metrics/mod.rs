//! Memory-utilization accounting over streams of [`MemoryAccess`] records.

mod class;
mod report;
mod staleness;

use serde::{Deserialize, Serialize};

pub use class::{class_divergence, ClassUsage};
pub use report::{UtilizationRow, UsageKind};
pub use staleness::{staleness_histogram, StalenessHistogram};

use crate::error::{Error, Result};
use crate::pkm::MemoryAccess;

/// Per-slot accumulators of one memory layer.
///
/// `u` counts positions that gave the slot positive weight, `t` counts
/// positions where it was the (head-aggregated) arg-max, `w` sums the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccessLog {
    pub slots: usize,
    pub heads: usize,
    pub queries: u64,
    pub u: Vec<u64>,
    pub t: Vec<u64>,
    pub w: Vec<f64>,
}

impl AccessLog {
    pub fn new(slots: usize, heads: usize) -> Self {
        Self {
            slots,
            heads,
            queries: 0,
            u: vec![0; slots],
            t: vec![0; slots],
            w: vec![0.0; slots],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.queries == 0
    }

    fn check(&self, slots: usize) -> Result<()> {
        if slots != self.slots {
            return Err(Error::SlotCountMismatch {
                index: 0,
                expected: self.slots,
                got: slots,
            });
        }
        Ok(())
    }

    fn record_position(&mut self, access: &MemoryAccess, p: usize) {
        let agg = access.aggregated(p);
        let mut best: Option<(usize, f64)> = None;
        for &(i, w) in &agg {
            if w > 0.0 {
                self.u[i] += 1;
            }
            self.w[i] += w;
            // `agg` is sorted by slot, so strict `>` keeps the lower index on ties.
            if best.is_none_or(|(_, bw)| w > bw) {
                best = Some((i, w));
            }
        }
        if let Some((i, _)) = best {
            self.t[i] += 1;
        }
        self.queries += 1;
    }

    pub fn record_access(&mut self, access: &MemoryAccess) -> Result<()> {
        self.check(access.slots)?;
        for p in 0..access.positions {
            self.record_position(access, p);
        }
        Ok(())
    }

    /// Records only positions with `keep[p]` (e.g. non-padding tokens).
    pub fn record_masked(&mut self, access: &MemoryAccess, keep: &[bool]) -> Result<()> {
        self.check(access.slots)?;
        if keep.len() != access.positions {
            return Err(Error::shape("record_masked", &[access.positions], &[keep.len()]));
        }
        for p in (0..access.positions).filter(|&p| keep[p]) {
            self.record_position(access, p);
        }
        Ok(())
    }

    /// Adds `other` into `self`; equal to logging both streams in sequence.
    pub fn merge(&mut self, other: &AccessLog) -> Result<()> {
        self.check(other.slots)?;
        self.queries += other.queries;
        for i in 0..self.slots {
            self.u[i] += other.u[i];
            self.t[i] += other.t[i];
            self.w[i] += other.w[i];
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.queries = 0;
        self.u.fill(0);
        self.t.fill(0);
        self.w.fill(0.0);
    }
}

/// `(MU, MU_top1)`: fraction of slots accessed at all / as top-1 at least once.
pub fn memory_usage(log: &AccessLog) -> (f64, f64) {
    if log.slots == 0 {
        return (0.0, 0.0);
    }
    let n = log.slots as f64;
    let used = log.u.iter().filter(|&&c| c > 0).count() as f64;
    let top1 = log.t.iter().filter(|&&c| c > 0).count() as f64;
    (used / n, top1 / n)
}

/// `log|K| + Σ p_i log p_i` of the normalized `counts`, clamped to `[0, log|K|]`.
pub fn kl_from_uniform(counts: &[f64]) -> Result<f64> {
    let total: f64 = counts.iter().sum();
    if counts.is_empty() || total <= 0.0 {
        return Err(Error::EmptyLog);
    }
    let log_k = (counts.len() as f64).ln();
    let neg_entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            p * p.ln()
        })
        .sum();
    Ok((log_k + neg_entropy).clamp(0.0, log_k))
}

/// `(KL_u, KL_w)` of normalized access counts and summed weights.
pub fn kl_uniform(log: &AccessLog) -> Result<(f64, f64)> {
    let u: Vec<f64> = log.u.iter().map(|&c| c as f64).collect();
    Ok((kl_from_uniform(&u)?, kl_from_uniform(&log.w)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn access(indices: Vec<u32>, weights: Vec<f32>, heads: usize, knn: usize, slots: usize) -> MemoryAccess {
        MemoryAccess {
            positions: indices.len() / (heads * knn),
            heads,
            knn,
            slots,
            indices,
            weights,
        }
    }

    #[test]
    fn singleton_access() {
        let mut log = AccessLog::new(16, 1);
        log.record_access(&access(vec![7], vec![1.0], 1, 1, 16)).unwrap();
        assert_eq!((log.u[7], log.t[7], log.w[7]), (1, 1, 1.0));
        assert_eq!(log.u.iter().sum::<u64>(), 1);
    }

    #[test]
    fn heads_are_aggregated_before_argmax() {
        // Slot 3 wins per-head in neither head but has the largest summed weight.
        let a = access(vec![1, 3, 2, 3], vec![0.6, 0.4, 0.6, 0.4], 2, 2, 4);
        let mut log = AccessLog::new(4, 2);
        log.record_access(&a).unwrap();
        assert_eq!(log.t, vec![0, 0, 0, 1]);
        assert_eq!(log.u, vec![0, 1, 1, 1]);
        assert!((log.w.iter().sum::<f64>() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn ties_go_to_lower_slot() {
        let a = access(vec![5, 2], vec![0.5, 0.5], 1, 2, 8);
        let mut log = AccessLog::new(8, 1);
        log.record_access(&a).unwrap();
        assert_eq!(log.t[2], 1);
        assert_eq!(log.t[5], 0);
    }

    #[test]
    fn usage_counts() {
        let mut log = AccessLog::new(4, 1);
        assert_eq!(memory_usage(&log), (0.0, 0.0));
        log.u = vec![3, 0, 1, 0];
        log.t = vec![1, 0, 0, 0];
        assert_eq!(memory_usage(&log), (0.5, 0.25));
    }

    #[test]
    fn kl_reference_values() {
        assert!(kl_from_uniform(&[2.0; 8]).unwrap().abs() < 1e-12);
        assert!((kl_from_uniform(&[0.0, 5.0, 0.0, 0.0]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let half = kl_from_uniform(&[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((half - (4f64.ln() + 0.5f64.ln())).abs() < 1e-12);
        assert!((half - 0.693_147_180_559_945_3).abs() < 1e-12);
        assert!(matches!(kl_from_uniform(&[0.0; 4]), Err(Error::EmptyLog)));
        assert!(kl_uniform(&AccessLog::new(4, 1)).is_err());
    }

    #[test]
    fn mismatched_slot_count_rejected() {
        let mut log = AccessLog::new(4, 1);
        assert!(log.record_access(&access(vec![1], vec![1.0], 1, 1, 8)).is_err());
        assert!(log.merge(&AccessLog::new(8, 1)).is_err());
    }
}
