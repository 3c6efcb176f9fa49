use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::optimizer::Optimizer;
use super::pretrain::{new_logs, record, MEMORY_PARAM};
use super::{warmup_lr, TrainConfig};
use crate::encoder::{argmax, special, Encoder, Phase, TokenBatch};
use crate::error::{Error, Result};
use crate::metrics::{AccessLog, UtilizationRow};
use crate::numerics::{derive_seed, rng_from_seed, AdamParams};

/// A labeled token sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub tokens: Vec<u32>,
    pub label: usize,
}

/// Every fifth example (the 5th, 10th, ...) goes to the dev split.
pub fn dev_split(data: &[LabeledExample]) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for (i, e) in data.iter().enumerate() {
        if i % 5 == 4 {
            dev.push(e.clone());
        } else {
            train.push(e.clone());
        }
    }
    (train, dev)
}

/// `[CLS] tokens…`, truncated to `max_len`.
fn with_cls(tokens: &[u32], max_len: usize) -> Vec<u32> {
    let mut row = Vec::with_capacity(tokens.len() + 1);
    if tokens.first() != Some(&special::CLS) {
        row.push(special::CLS);
    }
    row.extend_from_slice(tokens);
    row.truncate(max_len);
    row
}

pub fn example_batch(examples: &[&LabeledExample], max_len: usize) -> (TokenBatch, Vec<usize>) {
    let rows: Vec<Vec<u32>> = examples.iter().map(|e| with_cls(&e.tokens, max_len)).collect();
    (TokenBatch::from_rows(&rows), examples.iter().map(|e| e.label).collect())
}

/// Accuracy of `model` on `data` in evaluation mode.
pub fn accuracy(model: &Encoder<f32>, data: &[LabeledExample], batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyTargets);
    }
    let mut correct = 0;
    let classes = model.cls_head.as_ref().ok_or(Error::MissingHead)?.classes();
    for chunk in data.chunks(batch.max(1)) {
        let refs: Vec<&LabeledExample> = chunk.iter().collect();
        let (tokens, labels) = example_batch(&refs, model.config.max_len);
        let (logits, _) = model.classify_forward(&tokens, Phase::Eval, None)?;
        for (b, &y) in labels.iter().enumerate() {
            correct += (argmax(&logits[b * classes..(b + 1) * classes]) == y) as usize;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Per-layer memory usage of each class, counting non-padding positions.
pub fn usage_by_class(model: &Encoder<f32>, data: &[LabeledExample], classes: usize, batch: usize) -> Result<Vec<(usize, Vec<AccessLog>)>> {
    let mut per_class: Vec<Vec<(usize, AccessLog)>> = (0..classes).map(|_| new_logs(model)).collect();
    for c in 0..classes {
        let members: Vec<&LabeledExample> = data.iter().filter(|e| e.label == c).collect();
        for chunk in members.chunks(batch.max(1)) {
            let (tokens, _) = example_batch(chunk, model.config.max_len);
            let out = model.forward(&tokens, Phase::Eval, None)?;
            let keep: Vec<bool> = tokens.padding_mask().iter().map(|p| !p).collect();
            record(&mut per_class[c], &out.accesses, Some(&keep))?;
        }
    }
    let layers = model.config.active_memory_layers();
    Ok(layers
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, per_class.iter().map(|logs| logs[i].1.clone()).collect()))
        .collect())
}

pub struct FinetuneOutcome {
    pub model: Encoder<f32>,
    pub losses: Vec<f64>,
    pub initial_accuracy: f64,
    pub accuracy: f64,
    /// Usage over the dev split, per memory layer.
    pub utilization: Vec<UtilizationRow>,
}

/// Trains a classification head plus the trunk on `data` (80/20 train/dev split).
///
/// Batch-norm running statistics stay fixed; with `freeze_memory` every memory
/// parameter is left untouched.
pub fn finetune(mut model: Encoder<f32>, data: &[LabeledExample], cfg: &TrainConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let classes = data.iter().map(|e| e.label).max().map_or(0, |m| m + 1);
    let distinct = (0..classes).filter(|c| data.iter().any(|e| e.label == *c)).count();
    if distinct < 2 {
        return Err(Error::SingleClass);
    }
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "finetune"));
    match &model.cls_head {
        Some(h) if h.classes() == classes => {}
        _ => model.attach_classifier(classes, &mut rng)?,
    }
    let (train, dev) = dev_split(data);
    if train.is_empty() || dev.is_empty() {
        return Err(Error::InvalidConfig(format!("{} examples are too few to split", data.len())));
    }
    let initial_accuracy = accuracy(&model, &dev, cfg.batch_size)?;

    let mut opt = Optimizer::new(AdamParams::default(), cfg.sparse_optimizer);
    if cfg.freeze_memory {
        opt.freeze(MEMORY_PARAM);
    }
    let mut dropout_rng = rng_from_seed(derive_seed(cfg.seed, "dropout"));
    let warmup = cfg.warmup_steps();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let picks: Vec<&LabeledExample> = (0..cfg.batch_size).map(|_| &train[rng.random_range(0..train.len())]).collect();
        let (tokens, labels) = example_batch(&picks, model.config.max_len);
        let out = model.classify_step(&tokens, &labels, Phase::TrainFrozenNorm, Some(&mut dropout_rng))?;
        opt.step(&mut model, &out.grads, warmup_lr(cfg.lr, step, warmup), cfg.memory_lr)?;
        losses.push(out.loss);
    }
    let accuracy = accuracy(&model, &dev, cfg.batch_size)?;
    let usage = usage_by_class(&model, &dev, classes, cfg.batch_size)?;
    let mut utilization = Vec::new();
    for (layer, logs) in usage {
        let mut all = logs[0].clone();
        for l in &logs[1..] {
            all.merge(l)?;
        }
        utilization.push(UtilizationRow::from_log(layer, &all)?);
    }
    Ok(FinetuneOutcome {
        model,
        losses,
        initial_accuracy,
        accuracy,
        utilization,
    })
}
