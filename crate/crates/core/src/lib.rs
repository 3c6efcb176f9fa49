//! Product-key memory layers inside a small masked-language-model transformer,
//! with the memory-utilization accounting used to study slot staleness.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod params;
pub mod encoder;
pub mod metrics;
pub mod pkm;
pub mod train;
