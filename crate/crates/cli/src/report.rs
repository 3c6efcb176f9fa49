//! Files written by the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pkmlab::metrics::{StalenessHistogram, UsageKind, UtilizationRow};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const RUN_MANIFEST: &str = "run.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const UTILIZATION_CSV: &str = "utilization.csv";
pub const STALENESS_CSV: &str = "staleness.csv";
pub const BENCH_CSV: &str = "bench.csv";
pub const CLASSDIV_CSV: &str = "classdiv.csv";
pub const ANALYSIS_JSON: &str = "analysis.json";
pub const FINETUNE_JSON: &str = "finetune.json";

pub fn build_id() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), option_env!("PKMLAB_GIT_REV").unwrap_or("unknown"))
}

/// Written before anything else a command produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub build: String,
    pub seed: u64,
    pub config_path: PathBuf,
    pub config_sha256: String,
    /// Config after path resolution and command-line overrides.
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config_path: &Path, config: &RunConfig, out_dir: &Path, outputs: &[&str]) -> Result<Self> {
        let raw = fs::read(config_path).with_context(|| format!("reading {}", config_path.display()))?;
        Ok(Self {
            command: command.to_owned(),
            build: build_id(),
            seed,
            config_path: config_path.to_path_buf(),
            config_sha256: format!("{:x}", Sha256::digest(&raw)),
            config: config.clone(),
            out_dir: out_dir.to_path_buf(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = r.deserialize().collect::<Result<Vec<T>, _>>()?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilizationCsvRow {
    pub step: usize,
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

impl UtilizationCsvRow {
    pub fn new(step: usize, r: &UtilizationRow) -> Self {
        Self {
            step,
            layer: r.layer,
            mu: r.mu,
            mu_top1: r.mu_top1,
            kl_u: r.kl_u,
            kl_w: r.kl_w,
        }
    }
}

/// One staleness bucket. Slots never used have empty `checkpoint_index` and `step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StalenessCsvRow {
    pub checkpoint_index: Option<usize>,
    pub count: usize,
    pub layer: usize,
    pub kind: UsageKind,
    /// Training step of the checkpoint closing the interval.
    pub step: Option<usize>,
}

/// Rows of one histogram; `steps[c]` is the step of checkpoint `c` (`steps[0] = 0`).
pub fn staleness_rows(layer: usize, kind: UsageKind, h: &StalenessHistogram, steps: &[usize]) -> Vec<StalenessCsvRow> {
    let mut rows: Vec<StalenessCsvRow> = h
        .rows()
        .map(|(c, count)| StalenessCsvRow {
            checkpoint_index: Some(c),
            count,
            layer,
            kind,
            step: steps.get(c).copied(),
        })
        .collect();
    rows.push(StalenessCsvRow {
        checkpoint_index: None,
        count: h.never,
        layer,
        kind,
        step: None,
    });
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDivRow {
    pub layer: usize,
    pub class_a: String,
    pub class_b: String,
    /// Symmetrized KL between the two top-1 usage distributions.
    pub kl: f64,
    pub iou: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::BenchRow;

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        let h = StalenessHistogram {
            buckets: vec![1, 0, 5],
            never: 2,
        };
        let rows = staleness_rows(2, UsageKind::Top1, &h, &[0, 10, 20, 30]);
        write_csv(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("checkpoint_index,count,layer,kind,step\n1,1,2,top1,10\n"), "{text}");
        assert!(text.ends_with(",2,2,top1,\n"), "{text}");
        assert_eq!(read_csv::<StalenessCsvRow>(&p).unwrap(), rows);
        assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), h.total());

        let util = vec![UtilizationCsvRow {
            step: 5,
            layer: 2,
            mu: 0.5,
            mu_top1: 0.25,
            kl_u: 0.1,
            kl_w: 0.2,
        }];
        write_csv(&p, &util).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("step,layer,MU,MU_top1,KL_u,KL_w\n"));
        assert_eq!(read_csv::<UtilizationCsvRow>(&p).unwrap(), util);

        let bench = vec![BenchRow {
            group: "search".into(),
            variant: "exhaustive".into(),
            n_keys: 128,
            knn: 8,
            batch: 64,
            iterations: 30,
            median_ms: 1.5,
        }];
        write_csv(&p, &bench).unwrap();
        assert_eq!(read_csv::<BenchRow>(&p).unwrap(), bench);

        let div = vec![ClassDivRow {
            layer: 2,
            class_a: "neg".into(),
            class_b: "pos".into(),
            kl: 0.3,
            iou: 0.7,
        }];
        write_csv(&p, &div).unwrap();
        assert_eq!(read_csv::<ClassDivRow>(&p).unwrap(), div);
    }
}
