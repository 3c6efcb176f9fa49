use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{checkpoint_dir, save_checkpoint};
use super::data::{eval_batches, sample_mlm_batch, Corpus};
use super::optimizer::{Optimizer, TouchedRows};
use super::{warmup_lr, TrainConfig};
use crate::encoder::{Encoder, LayerAccess, MlmBatch, Phase};
use crate::error::{Error, Result};
use crate::metrics::{staleness_histogram, AccessLog, StalenessHistogram, UsageKind, UtilizationRow};
use crate::numerics::{derive_seed, rng_from_seed, AdamParams};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINTS_DIR: &str = "checkpoints";

/// Name fragment shared by every memory parameter.
pub const MEMORY_PARAM: &str = "block.memory.";

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub train_loss: f64,
    pub mlm_loss: f64,
    pub ppl: f64,
    pub utilization: Vec<UtilizationRow>,
}

pub struct Evaluation {
    pub loss: f64,
    pub ppl: f64,
    /// `(layer, log)` per memory layer, ascending.
    pub logs: Vec<(usize, AccessLog)>,
}

impl Evaluation {
    pub fn utilization(&self) -> Result<Vec<UtilizationRow>> {
        self.logs.iter().map(|(l, log)| UtilizationRow::from_log(*l, log)).collect()
    }

    pub fn log(&self, layer: usize) -> Option<&AccessLog> {
        self.logs.iter().find(|(l, _)| *l == layer).map(|(_, g)| g)
    }
}

pub(crate) fn new_logs(model: &Encoder<f32>) -> Vec<(usize, AccessLog)> {
    let m = &model.config.memory;
    model
        .config
        .active_memory_layers()
        .into_iter()
        .map(|l| (l, AccessLog::new(m.slots(), m.heads)))
        .collect()
}

pub(crate) fn record(logs: &mut [(usize, AccessLog)], accesses: &[LayerAccess], keep: Option<&[bool]>) -> Result<()> {
    for a in accesses {
        if let Some((_, log)) = logs.iter_mut().find(|(l, _)| *l == a.layer) {
            match keep {
                Some(k) => log.record_masked(&a.access, k)?,
                None => log.record_access(&a.access)?,
            }
        }
    }
    Ok(())
}

/// Target-weighted mean MLM loss and memory usage over fixed held-out batches.
pub fn evaluate(model: &Encoder<f32>, batches: &[MlmBatch]) -> Result<Evaluation> {
    let mut logs = new_logs(model);
    let (mut total, mut count) = (0.0, 0usize);
    for b in batches {
        let (loss, accesses) = model.mlm_loss(b, Phase::Eval, None)?;
        total += loss * b.targets.len() as f64;
        count += b.targets.len();
        record(&mut logs, &accesses, None)?;
    }
    if count == 0 {
        return Err(Error::EmptyTargets);
    }
    let loss = total / count as f64;
    Ok(Evaluation {
        loss,
        ppl: loss.exp(),
        logs,
    })
}

/// Held-out batches of `corpus` as used by [`pretrain`] for `cfg`.
pub fn heldout_batches(model: &Encoder<f32>, corpus: &Corpus, cfg: &TrainConfig) -> Result<Vec<MlmBatch>> {
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "eval"));
    eval_batches(
        &corpus.eval,
        cfg.batch_size,
        cfg.seq_len,
        cfg.eval_batches,
        model.config.vocab_size,
        cfg.mask_prob,
        &mut rng,
    )
}

pub struct PretrainOutcome {
    pub model: Encoder<f32>,
    pub train_losses: Vec<f64>,
    pub evals: Vec<EvalRecord>,
    pub checkpoints: Vec<(usize, Option<PathBuf>)>,
    /// Training-stream usage of each checkpoint interval: `intervals[c][i] = (layer, log)`.
    pub intervals: Vec<Vec<(usize, AccessLog)>>,
    /// Rows written by each optimizer step.
    pub touched: Vec<TouchedRows>,
}

impl PretrainOutcome {
    pub fn staleness(&self, layer: usize, kind: UsageKind) -> Result<StalenessHistogram> {
        let snaps: Vec<Vec<u64>> = self
            .intervals
            .iter()
            .filter_map(|iv| iv.iter().find(|(l, _)| *l == layer))
            .map(|(_, log)| match kind {
                UsageKind::Top1 => log.t.clone(),
                UsageKind::TopK => log.u.clone(),
            })
            .collect();
        staleness_histogram(&snaps)
    }
}

/// Options that do not change the training trajectory.
#[derive(Default)]
pub struct RunHooks<'a> {
    pub out_dir: Option<&'a Path>,
    pub on_eval: Option<&'a mut dyn FnMut(&EvalRecord)>,
    /// Keep per-step touched-row sets in the outcome.
    pub keep_touched: bool,
}

/// Masked-LM training of `model` on `corpus.train`.
///
/// Saves a checkpoint at step 0, every checkpoint interval and at the last
/// step; evaluates on the held-out split every eval interval.
pub fn pretrain(mut model: Encoder<f32>, corpus: &Corpus, cfg: &TrainConfig, mut hooks: RunHooks<'_>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if cfg.seq_len > model.config.max_len {
        return Err(Error::SequenceTooLong {
            len: cfg.seq_len,
            max: model.config.max_len,
        });
    }
    let needed = cfg.batch_size * cfg.seq_len;
    if corpus.train.len() < needed {
        return Err(Error::CorpusTooSmall {
            tokens: corpus.train.len(),
            needed,
        });
    }
    let vocab = model.config.vocab_size;
    let mut data_rng = rng_from_seed(derive_seed(cfg.seed, "data"));
    let mut dropout_rng = rng_from_seed(derive_seed(cfg.seed, "dropout"));
    let heldout = if cfg.steps > 0 { heldout_batches(&model, corpus, cfg)? } else { Vec::new() };

    let mut opt = Optimizer::new(AdamParams::default(), cfg.sparse_optimizer);
    let phase = if cfg.freeze_memory {
        opt.freeze(MEMORY_PARAM);
        Phase::TrainFrozenNorm
    } else {
        Phase::Train
    };

    let ckpt_root = hooks.out_dir.map(|d| d.join(CHECKPOINTS_DIR));
    let mut metrics_file = match hooks.out_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            Some(fs::File::create(d.join(METRICS_FILE))?)
        }
        None => None,
    };
    let save = |model: &Encoder<f32>, step: usize| -> Result<Option<PathBuf>> {
        match &ckpt_root {
            Some(root) => {
                let dir = checkpoint_dir(root, step as u64);
                save_checkpoint(model, step as u64, &dir)?;
                Ok(Some(dir))
            }
            None => Ok(None),
        }
    };

    let mut checkpoints = vec![(0, save(&model, 0)?)];
    let mut interval = new_logs(&model);
    let mut intervals = Vec::new();
    let mut train_losses = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut touched_log = Vec::new();
    let (warmup, ckpt_every, eval_every) = (cfg.warmup_steps(), cfg.checkpoint_every(), cfg.eval_every());
    let mut since_eval = (0.0, 0usize);

    for step in 1..=cfg.steps {
        let batch = sample_mlm_batch(&corpus.train, cfg.batch_size, cfg.seq_len, vocab, cfg.mask_prob, &mut data_rng)?;
        let out = model.mlm_step(&batch, phase, Some(&mut dropout_rng))?;
        if phase == Phase::Train {
            model.update_norm_stats(&out.cache);
        }
        record(&mut interval, &out.accesses, None)?;
        let touched = opt.step(&mut model, &out.grads, warmup_lr(cfg.lr, step, warmup), cfg.memory_lr)?;
        if hooks.keep_touched {
            touched_log.push(touched);
        }
        train_losses.push(out.loss);
        since_eval.0 += out.loss;
        since_eval.1 += 1;

        let last = step == cfg.steps;
        if step % eval_every == 0 || last {
            let ev = evaluate(&model, &heldout)?;
            let rec = EvalRecord {
                step,
                train_loss: since_eval.0 / since_eval.1 as f64,
                mlm_loss: ev.loss,
                ppl: ev.ppl,
                utilization: ev.utilization()?,
            };
            since_eval = (0.0, 0);
            if let Some(f) = &mut metrics_file {
                writeln!(f, "{}", serde_json::to_string(&rec)?)?;
            }
            if let Some(cb) = hooks.on_eval.as_mut() {
                cb(&rec);
            }
            evals.push(rec);
        }
        if step % ckpt_every == 0 || last {
            checkpoints.push((step, save(&model, step)?));
            intervals.push(interval.clone());
            interval.iter_mut().for_each(|(_, log)| log.reset());
        }
    }
    Ok(PretrainOutcome {
        model,
        train_losses,
        evals,
        checkpoints,
        intervals,
        touched: touched_log,
    })
}
