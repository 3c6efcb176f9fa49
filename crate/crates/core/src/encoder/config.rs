use serde::{Deserialize, Serialize};

use super::BlockVariant;
use crate::error::{Error, Result};
use crate::pkm::{MemoryConfig, NormMode};

/// Reserved token ids shared by every vocabulary.
pub mod special {
    pub const PAD: u32 = 0;
    pub const MASK: u32 = 1;
    pub const UNK: u32 = 2;
    pub const CLS: u32 = 3;
    /// Number of reserved ids; ordinary tokens start here.
    pub const COUNT: u32 = 4;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub attn_heads: usize,
    pub ffn_dim: usize,
    /// Filled from the vocabulary when zero.
    #[serde(default)]
    pub vocab_size: usize,
    pub max_len: usize,
    /// 1-based layer indices whose block carries a memory.
    #[serde(default)]
    pub memory_layers: Vec<usize>,
    /// Block used at memory positions; `ffn` gives a memory-free model.
    #[serde(default)]
    pub memory_block: BlockVariant,
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Classes of the sequence-classification head, when attached.
    #[serde(default)]
    pub n_classes: Option<usize>,
}

fn default_dropout() -> f64 {
    0.1
}

fn default_init_std() -> f64 {
    0.02
}

impl Default for EncoderConfig {
    /// Desk-scale model: 4 layers of width 128 with memories at layers 2 and 4.
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 128,
            attn_heads: 4,
            ffn_dim: 512,
            vocab_size: 0,
            max_len: 64,
            memory_layers: vec![2, 4],
            memory_block: BlockVariant::Resm,
            memory: MemoryConfig::default(),
            dropout: default_dropout(),
            init_std: default_init_std(),
            n_classes: None,
        }
    }
}

impl EncoderConfig {
    /// Block variant of 1-based layer `layer`.
    pub fn block_at(&self, layer: usize) -> BlockVariant {
        if self.memory_layers.contains(&layer) {
            self.memory_block
        } else {
            BlockVariant::Ffn
        }
    }

    pub fn has_memory(&self) -> bool {
        self.memory_block.has_memory() && !self.memory_layers.is_empty()
    }

    /// Layers that actually hold a memory (1-based).
    pub fn active_memory_layers(&self) -> Vec<usize> {
        if self.memory_block.has_memory() {
            let mut v = self.memory_layers.clone();
            v.sort_unstable();
            v
        } else {
            Vec::new()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layers == 0 || self.d_model == 0 || self.ffn_dim == 0 || self.max_len == 0 {
            return bad("layers, d_model, ffn_dim and max_len must be positive".into());
        }
        if self.attn_heads == 0 || self.d_model % self.attn_heads != 0 {
            return bad(format!("d_model {} not divisible by attn_heads {}", self.d_model, self.attn_heads));
        }
        if self.vocab_size <= special::COUNT as usize {
            return bad(format!("vocab_size {} leaves no ordinary tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        let mut seen = Vec::new();
        for &l in &self.memory_layers {
            if l == 0 || l > self.layers {
                return bad(format!("memory layer {l} outside [1, {}]", self.layers));
            }
            if seen.contains(&l) {
                return bad(format!("memory layer {l} listed twice"));
            }
            seen.push(l);
        }
        if self.has_memory() {
            self.memory.validate()?;
            if self.memory.v_dim != self.d_model {
                return bad(format!("memory v_dim {} must equal d_model {}", self.memory.v_dim, self.d_model));
            }
        }
        if self.n_classes == Some(0) || self.n_classes == Some(1) {
            return bad("n_classes must be at least 2".into());
        }
        Ok(())
    }
}

/// Training/evaluation behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Dropout on, batch-norm batch statistics.
    Train,
    /// Dropout on, batch-norm running statistics (frozen).
    TrainFrozenNorm,
    /// Dropout off, running statistics.
    Eval,
}

impl Phase {
    pub fn norm_mode(self) -> NormMode {
        match self {
            Phase::Train => NormMode::Batch,
            Phase::TrainFrozenNorm | Phase::Eval => NormMode::Running,
        }
    }

    pub fn dropout(self) -> bool {
        !matches!(self, Phase::Eval)
    }
}
