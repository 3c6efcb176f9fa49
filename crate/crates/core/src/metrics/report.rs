use serde::{Deserialize, Serialize};

use super::{kl_uniform, memory_usage, AccessLog};
use crate::error::Result;

/// Which accumulator a staleness histogram was built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UsageKind {
    Top1,
    TopK,
}

/// One row of a utilization report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilizationRow {
    pub layer: usize,
    #[serde(rename = "MU")]
    pub mu: f64,
    #[serde(rename = "MU_top1")]
    pub mu_top1: f64,
    #[serde(rename = "KL_u")]
    pub kl_u: f64,
    #[serde(rename = "KL_w")]
    pub kl_w: f64,
}

impl UtilizationRow {
    pub fn from_log(layer: usize, log: &AccessLog) -> Result<Self> {
        let (mu, mu_top1) = memory_usage(log);
        let (kl_u, kl_w) = kl_uniform(log)?;
        Ok(Self {
            layer,
            mu,
            mu_top1,
            kl_u,
            kl_w,
        })
    }
}
