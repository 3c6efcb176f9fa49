//! Desk-scale drift comparison: memory-free trunk, scratch PKM and ResM
//! grafted onto the trunk, trained on the same synthetic corpus.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pkmlab::encoder::EncoderConfig;
use pkmlab::metrics::UsageKind;
use pkmlab::train::{checkpoint_dir, EvalRecord, ModelVariant, TrainConfig, CHECKPOINTS_DIR, METRICS_FILE};
use serde::{Deserialize, Serialize};

use crate::commands::{run, Command, RunOptions};
use crate::config::RunConfig;
use crate::data::synthetic_corpus;
use crate::report::{read_csv, read_json, write_json, StalenessCsvRow, STALENESS_CSV};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    /// Steps of the scratch-PKM and grafted runs; the trunk runs twice as long.
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub corpus_bytes: usize,
    pub people: usize,
    pub model: EncoderConfig,
}

impl DriftSpec {
    pub fn desk(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            batch_size: 32,
            seed,
            corpus_bytes: 1_000_000,
            people: 2000,
            model: EncoderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub out_dir: PathBuf,
    pub evals: Vec<EvalRecord>,
    /// Top-1 staleness counts of the earliest memory layer, by checkpoint index.
    pub staleness: Vec<usize>,
    pub never_used: usize,
}

impl RunResult {
    pub fn eval_at(&self, step: usize) -> Option<&EvalRecord> {
        self.evals.iter().find(|e| e.step == step)
    }

    pub fn last(&self) -> &EvalRecord {
        self.evals.last().expect("runs with steps > 0 evaluate")
    }

    pub fn mu_top1(&self, layer: usize) -> Option<f64> {
        self.last().utilization.iter().find(|u| u.layer == layer).map(|u| u.mu_top1)
    }

    pub fn last_bucket(&self) -> usize {
        self.staleness.last().copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub spec: DriftSpec,
    pub layer: usize,
    pub trunk: RunResult,
    pub pkm: RunResult,
    pub resm: RunResult,
    pub trunk_ppl_at_steps: f64,
    pub trunk_ppl_at_total: f64,
    pub pkm_ppl: f64,
    pub resm_ppl: f64,
    pub pkm_mu_top1: f64,
    pub resm_mu_top1: f64,
    pub pkm_last_bucket: usize,
    pub resm_last_bucket: usize,
}

impl DriftReport {
    /// A memory model beats the trunk at equal total steps.
    pub fn memory_beats_trunk(&self) -> bool {
        self.pkm_ppl < self.trunk_ppl_at_steps || self.resm_ppl < self.trunk_ppl_at_total
    }

    pub fn mu_gap(&self) -> f64 {
        self.resm_mu_top1 - self.pkm_mu_top1
    }

    pub fn staleness_favors_resm(&self) -> bool {
        self.resm_last_bucket > self.pkm_last_bucket
    }
}

fn read_result(out: &Path, layer: usize) -> Result<RunResult> {
    let text = fs::read_to_string(out.join(METRICS_FILE)).with_context(|| format!("reading {}", out.display()))?;
    let evals = text
        .lines()
        .map(serde_json::from_str)
        .collect::<Result<Vec<EvalRecord>, _>>()
        .context("parsing metrics")?;
    let rows: Vec<StalenessCsvRow> = read_csv(&out.join(STALENESS_CSV))?;
    let mine = rows.iter().filter(|r| r.layer == layer && r.kind == UsageKind::Top1);
    let mut staleness = Vec::new();
    let mut never_used = 0;
    for r in mine {
        match r.checkpoint_index {
            Some(_) => staleness.push(r.count),
            None => never_used = r.count,
        }
    }
    Ok(RunResult {
        out_dir: out.to_path_buf(),
        evals,
        staleness,
        never_used,
    })
}

fn train_config(spec: &DriftSpec, steps: usize, variant: ModelVariant, init_from: Option<PathBuf>) -> TrainConfig {
    let interval = (spec.steps / 10).max(1);
    TrainConfig {
        steps,
        batch_size: spec.batch_size,
        seq_len: spec.model.max_len,
        warmup: Some(spec.steps / 20),
        seed: spec.seed,
        checkpoint_interval: Some(interval),
        eval_interval: Some(interval),
        variant,
        init_from,
        ..TrainConfig::default()
    }
}

fn launch(root: &Path, name: &str, cmd: Command, cfg: &RunConfig, verbose: bool) -> Result<PathBuf> {
    let config = root.join(format!("{name}.json"));
    write_json(&config, cfg)?;
    let out = root.join(name);
    let summary = run(
        cmd,
        &RunOptions {
            config,
            out: Some(out),
            seed: None,
            verbose,
        },
    )?;
    Ok(summary.out_dir)
}

/// Runs the three trainings under `root/seed-<seed>/` and writes `drift.json` there.
///
/// The corpus is generated once per `root` and shared by every seed.
pub fn drift(root: &Path, spec: &DriftSpec, verbose: bool) -> Result<DriftReport> {
    let corpus = root.join("corpus.txt");
    if !corpus.exists() {
        fs::create_dir_all(root)?;
        let mut text = synthetic_corpus(spec.corpus_bytes, spec.people, 1).join("\n");
        text.push('\n');
        fs::write(&corpus, text)?;
    }
    let dir = root.join(format!("seed-{}", spec.seed));
    fs::create_dir_all(&dir)?;
    let layer = *spec.model.memory_layers.iter().min().context("drift needs a memory layer")?;
    let base = RunConfig {
        corpus: Some(corpus.clone()),
        model: spec.model.clone(),
        ..RunConfig::default()
    };

    let trunk_cfg = RunConfig {
        train: Some(train_config(spec, 2 * spec.steps, ModelVariant::Ffn, None)),
        ..base.clone()
    };
    let trunk = launch(&dir, "trunk", Command::Pretrain, &trunk_cfg, verbose)?;

    let pkm_cfg = RunConfig {
        train: Some(train_config(spec, spec.steps, ModelVariant::Pkm, None)),
        ..base.clone()
    };
    let pkm = launch(&dir, "pkm", Command::Pretrain, &pkm_cfg, verbose)?;

    let graft_from = checkpoint_dir(&trunk.join(CHECKPOINTS_DIR), spec.steps as u64);
    let resm_cfg = RunConfig {
        train: Some(train_config(spec, spec.steps, ModelVariant::Resm, Some(graft_from))),
        ..base
    };
    let resm = launch(&dir, "resm", Command::Graft, &resm_cfg, verbose)?;

    let (trunk, pkm, resm) = (read_result(&trunk, layer)?, read_result(&pkm, layer)?, read_result(&resm, layer)?);
    let ppl = |r: &RunResult, step: usize| r.eval_at(step).map(|e| e.ppl).with_context(|| format!("no eval at step {step}"));
    let report = DriftReport {
        spec: spec.clone(),
        layer,
        trunk_ppl_at_steps: ppl(&trunk, spec.steps)?,
        trunk_ppl_at_total: ppl(&trunk, 2 * spec.steps)?,
        pkm_ppl: pkm.last().ppl,
        resm_ppl: resm.last().ppl,
        pkm_mu_top1: pkm.mu_top1(layer).context("pkm utilization")?,
        resm_mu_top1: resm.mu_top1(layer).context("resm utilization")?,
        pkm_last_bucket: pkm.last_bucket(),
        resm_last_bucket: resm.last_bucket(),
        trunk,
        pkm,
        resm,
    };
    write_json(&dir.join("drift.json"), &report)?;
    Ok(report)
}

pub fn read_report(path: &Path) -> Result<DriftReport> {
    read_json(path)
}
