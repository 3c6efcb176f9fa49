use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::encoder::BlockVariant;
use crate::error::{Error, Result};
use crate::pkm::SparseOptimizerKind;

/// Model family of a training run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Memory-free trunk.
    Ffn,
    Pkm,
    #[default]
    Resm,
    /// ResM whose FFN at memory positions is re-initialized when grafting.
    ResmReinitFfn,
}

impl ModelVariant {
    pub fn block(self) -> BlockVariant {
        match self {
            ModelVariant::Ffn => BlockVariant::Ffn,
            ModelVariant::Pkm => BlockVariant::Pkm,
            ModelVariant::Resm | ModelVariant::ResmReinitFfn => BlockVariant::Resm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_seq")]
    pub seq_len: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Learning rate of the row-sparse memory-value updates.
    #[serde(default = "default_memory_lr")]
    pub memory_lr: f64,
    /// Linear warmup length; 5% of `steps` when absent.
    #[serde(default)]
    pub warmup: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// 10% of `steps` when absent.
    #[serde(default)]
    pub checkpoint_interval: Option<usize>,
    /// Same as the checkpoint interval when absent.
    #[serde(default)]
    pub eval_interval: Option<usize>,
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
    #[serde(default)]
    pub variant: ModelVariant,
    #[serde(default)]
    pub init_from: Option<PathBuf>,
    #[serde(default)]
    pub freeze_memory: bool,
    #[serde(default)]
    pub sparse_optimizer: SparseOptimizerKind,
    /// Number of held-out batches per evaluation.
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
}

fn default_batch() -> usize {
    32
}
fn default_seq() -> usize {
    64
}
fn default_lr() -> f64 {
    5e-4
}
fn default_memory_lr() -> f64 {
    1e-3
}
fn default_mask_prob() -> f64 {
    0.15
}
fn default_eval_batches() -> usize {
    8
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: default_batch(),
            seq_len: default_seq(),
            lr: default_lr(),
            memory_lr: default_memory_lr(),
            warmup: None,
            seed: 0,
            checkpoint_interval: None,
            eval_interval: None,
            mask_prob: default_mask_prob(),
            variant: ModelVariant::default(),
            init_from: None,
            freeze_memory: false,
            sparse_optimizer: SparseOptimizerKind::default(),
            eval_batches: default_eval_batches(),
        }
    }
}

impl TrainConfig {
    pub fn warmup_steps(&self) -> usize {
        self.warmup.unwrap_or(self.steps / 20)
    }

    pub fn checkpoint_every(&self) -> usize {
        self.checkpoint_interval.unwrap_or(self.steps / 10).max(1)
    }

    pub fn eval_every(&self) -> usize {
        self.eval_interval.unwrap_or_else(|| self.checkpoint_every()).max(1)
    }

    /// `lr = 0` is accepted as a no-op run.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive".into());
        }
        if self.warmup_steps() > self.steps {
            return bad(format!("warmup {} exceeds steps {}", self.warmup_steps(), self.steps));
        }
        if !(self.lr >= 0.0 && self.memory_lr >= 0.0 && self.lr.is_finite() && self.memory_lr.is_finite()) {
            return bad("learning rates must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return bad(format!("mask_prob {} not in [0, 1]", self.mask_prob));
        }
        if self.eval_batches == 0 {
            return bad("eval_batches must be positive".into());
        }
        Ok(())
    }
}

/// Linear warmup to `base` over `warmup` steps, then constant. `step` is 1-based.
pub fn warmup_lr(base: f64, step: usize, warmup: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * step as f64 / warmup as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_exactly_linear() {
        for s in 1..=100 {
            assert_eq!(warmup_lr(2e-3, s, 100), 2e-3 * s as f64 / 100.0);
        }
        assert_eq!(warmup_lr(2e-3, 101, 100), 2e-3);
        assert_eq!(warmup_lr(2e-3, 1, 0), 2e-3);
    }

    #[test]
    fn derived_intervals() {
        let c = TrainConfig {
            steps: 200,
            ..TrainConfig::default()
        };
        assert_eq!((c.warmup_steps(), c.checkpoint_every(), c.eval_every()), (10, 20, 20));
        let c = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        c.validate().unwrap();
        assert_eq!(c.checkpoint_every(), 1);
    }

    #[test]
    fn invalid_configs() {
        let base = TrainConfig::default();
        assert!(TrainConfig { warmup: Some(20_000), ..base.clone() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..base }.validate().is_err());
    }

    #[test]
    fn variant_names() {
        let v: ModelVariant = serde_json::from_str("\"resm_reinit_ffn\"").unwrap();
        assert_eq!(v, ModelVariant::ResmReinitFfn);
        assert_eq!(v.block(), BlockVariant::Resm);
    }
}
