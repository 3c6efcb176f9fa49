//! Product-key memory: exact sub-key search, the memory layer and its sparse
//! value optimizer.

mod config;
mod layer;
mod search;
mod sparse;

pub use config::{MemoryConfig, ValueInit};
pub use layer::{
    MemoryAccess, MemoryCache, MemoryForward, MemoryGrads, NormMode, ProductKeyMemory, BATCH_NORM_EPS,
    BATCH_NORM_MOMENTUM,
};
pub use search::{exhaustive_topk, product_topk, split_query, subkey_topk};
pub use sparse::{sparse_value_update, SparseAdamState, SparseOptimizerKind, SparseRows};
