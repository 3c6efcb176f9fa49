//! Post-LN transformer encoder whose feed-forward sub-layers can be swapped for
//! PKM or ResM blocks.

mod attention;
mod block;
mod config;
mod dropout;
mod heads;
mod mlm;
mod model;

pub use attention::{AttentionCache, SelfAttention};
pub use block::{BlockOutput, BlockVariant, FeedForward, FeedForwardCache, MemoryBlock, MemoryBlockCache};
pub use config::{special, EncoderConfig, Phase};
pub use dropout::Dropout;
pub use heads::{ClassifierCache, ClassifierHead, MlmHead, MlmHeadCache};
pub use mlm::{mlm_mask, MaskRule, MlmBatch};
pub use model::{argmax, Encoder, EncoderCache, EncoderLayer, EncoderOutput, LayerAccess, StepOutput, TokenBatch};
