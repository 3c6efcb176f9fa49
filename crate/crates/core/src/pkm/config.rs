use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the value table is initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueInit {
    /// Gaussian with standard deviation `v_dim^-1/2`.
    #[default]
    Gaussian,
    /// All zeros: the layer starts as the constant-zero function.
    Zeros,
}

/// Hyper-parameters of one product-key memory layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    /// Sub-key codebook size `C`; the memory has `C²` slots.
    pub n_keys: usize,
    pub heads: usize,
    /// Keys selected per head.
    pub knn: usize,
    /// Query / key dimension (even).
    pub k_dim: usize,
    /// Value dimension; must equal the model width.
    pub v_dim: usize,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
    #[serde(default)]
    pub value_init: ValueInit,
}

fn default_true() -> bool {
    true
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            n_keys: 32,
            heads: 2,
            knn: 8,
            k_dim: 32,
            v_dim: 128,
            batch_norm: true,
            value_init: ValueInit::Gaussian,
        }
    }
}

impl MemoryConfig {
    /// Number of addressable slots `|K| = C²`.
    pub fn slots(&self) -> usize {
        self.n_keys * self.n_keys
    }

    pub fn half_dim(&self) -> usize {
        self.k_dim / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_keys < 2 {
            return Err(Error::InvalidConfig(format!("memory n_keys must be >= 2, got {}", self.n_keys)));
        }
        if self.heads == 0 {
            return Err(Error::InvalidConfig("memory heads must be >= 1".into()));
        }
        if self.knn == 0 || self.knn > self.n_keys {
            return Err(Error::KTooLarge {
                k: self.knn,
                c: self.n_keys,
            });
        }
        if self.k_dim == 0 || self.k_dim % 2 != 0 {
            return Err(Error::OddQueryDim(self.k_dim));
        }
        if self.v_dim == 0 {
            return Err(Error::InvalidConfig("memory v_dim must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_has_c_squared_slots() {
        let c = MemoryConfig::default();
        c.validate().unwrap();
        assert_eq!(c.slots(), 1024);
    }

    #[test]
    fn rejects_bad_values() {
        let base = MemoryConfig::default();
        assert!(MemoryConfig { n_keys: 1, ..base.clone() }.validate().is_err());
        assert!(MemoryConfig { knn: 33, ..base.clone() }.validate().is_err());
        assert!(MemoryConfig { knn: 0, ..base.clone() }.validate().is_err());
        assert!(MemoryConfig { k_dim: 7, ..base.clone() }.validate().is_err());
        assert!(MemoryConfig { heads: 0, ..base }.validate().is_err());
    }

    #[test]
    fn json_defaults_fill_optional_fields() {
        let c: MemoryConfig =
            serde_json::from_str(r#"{"n_keys":4,"heads":1,"knn":2,"k_dim":4,"v_dim":8}"#).unwrap();
        assert!(c.batch_norm);
        assert_eq!(c.value_init, ValueInit::Gaussian);
    }
}
