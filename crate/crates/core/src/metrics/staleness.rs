use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slots grouped by the last checkpoint interval in which they were used.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StalenessHistogram {
    /// `buckets[c - 1]` counts slots whose last use fell in interval `c`.
    pub buckets: Vec<usize>,
    pub never: usize,
}

impl StalenessHistogram {
    pub fn total(&self) -> usize {
        self.buckets.iter().sum::<usize>() + self.never
    }

    /// Count in the final checkpoint bucket.
    pub fn last(&self) -> usize {
        self.buckets.last().copied().unwrap_or(0)
    }

    /// `(checkpoint, count)` pairs with the 1-based checkpoint index.
    pub fn rows(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.buckets.iter().enumerate().map(|(i, &c)| (i + 1, c))
    }
}

/// Buckets each slot by the largest (1-based) interval with a positive count.
///
/// `snapshots` are per-interval counts, reset between checkpoints.
pub fn staleness_histogram<C: Copy + Default + PartialOrd>(snapshots: &[Vec<C>]) -> Result<StalenessHistogram> {
    let first = snapshots.first().ok_or(Error::EmptyLog)?;
    let slots = first.len();
    for (i, s) in snapshots.iter().enumerate() {
        if s.len() != slots {
            return Err(Error::SlotCountMismatch {
                index: i,
                expected: slots,
                got: s.len(),
            });
        }
    }
    let mut buckets = vec![0; snapshots.len()];
    let mut never = 0;
    for slot in 0..slots {
        match snapshots.iter().rposition(|s| s[slot] > C::default()) {
            Some(c) => buckets[c] += 1,
            None => never += 1,
        }
    }
    Ok(StalenessHistogram { buckets, never })
}
