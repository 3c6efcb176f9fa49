use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pkmlab::encoder::{Encoder, EncoderConfig};
use pkmlab::metrics::{class_divergence, ClassUsage, UsageKind};
use pkmlab::numerics::{derive_seed, rng_from_seed};
use pkmlab::train::{
    checkpoint_dir, eval_batches, evaluate, finetune, init_from_pretrained, load_checkpoint, pretrain, save_checkpoint,
    usage_by_class, Corpus, EvalRecord, ModelVariant, PretrainOutcome, RunHooks, TrainConfig, CHECKPOINTS_DIR, METRICS_FILE,
};
use serde::{Deserialize, Serialize};

use crate::bench::run_bench;
use crate::config::RunConfig;
use crate::data::{read_lines, LabeledText};
use crate::report::*;
use crate::vocab::Vocab;

/// Environment variable overriding the output directory.
pub const OUT_ENV: &str = "PKMLAB_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Pretrain,
    Graft,
    Finetune,
    Analyze,
    Classdiv,
    Bench,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Graft => "graft",
            Command::Finetune => "finetune",
            Command::Analyze => "analyze",
            Command::Classdiv => "classdiv",
            Command::Bench => "bench",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Print evaluation progress to stderr.
    pub verbose: bool,
}

impl RunOptions {
    pub fn new(config: impl Into<PathBuf>) -> Self {
        Self {
            config: config.into(),
            out: None,
            seed: None,
            verbose: false,
        }
    }

    fn out_dir(&self, cmd: Command) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("pkmlab-out").join(cmd.name()))
    }
}

/// What a command produced.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

struct Ctx {
    cmd: Command,
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
    verbose: bool,
    files: Vec<PathBuf>,
}

impl Ctx {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.files.push(p.clone());
        p
    }

    fn train(&self) -> Result<TrainConfig> {
        let mut t = self.cfg.train()?.clone();
        t.seed = self.seed;
        Ok(t)
    }

    fn train_or_default(&self) -> TrainConfig {
        let mut t = self.cfg.train.clone().unwrap_or(TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        });
        t.seed = self.seed;
        t
    }

    /// Explicit `vocab`, else `vocab.json` in or above `checkpoint`.
    fn find_vocab(&self, checkpoint: Option<&Path>) -> Result<Option<Vocab>> {
        if let Some(p) = &self.cfg.vocab {
            return Vocab::load(p).map(Some);
        }
        if let Some(c) = checkpoint {
            for dir in c.ancestors().take(3) {
                let p = dir.join(VOCAB_FILE);
                if p.exists() {
                    return Vocab::load(&p).map(Some);
                }
            }
        }
        Ok(None)
    }

    fn save_vocab(&mut self, vocab: &Vocab) -> Result<()> {
        let p = self.path(VOCAB_FILE);
        vocab.save(&p)
    }
}

fn model_config(base: &EncoderConfig, vocab: &Vocab) -> Result<EncoderConfig> {
    let mut cfg = base.clone();
    if cfg.vocab_size == 0 {
        cfg.vocab_size = vocab.len();
    } else if cfg.vocab_size != vocab.len() {
        bail!("model.vocab_size {} does not match the vocabulary ({} ids)", cfg.vocab_size, vocab.len());
    }
    Ok(cfg)
}

fn check_vocab(model: &Encoder<f32>, vocab: &Vocab) -> Result<()> {
    if model.config.vocab_size != vocab.len() {
        bail!("checkpoint vocabulary has {} ids, vocab file {}", model.config.vocab_size, vocab.len());
    }
    Ok(())
}

/// Runs `cmd`, writing the run manifest before any other output.
pub fn run(cmd: Command, opts: &RunOptions) -> Result<RunSummary> {
    let cfg = RunConfig::load(&opts.config)?;
    let seed = opts.seed.or(cfg.train.as_ref().map(|t| t.seed)).unwrap_or(0);
    let out = opts.out_dir(cmd);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut snapshot = cfg.clone();
    if let Some(t) = &mut snapshot.train {
        t.seed = seed;
    }
    let mut ctx = Ctx {
        cmd,
        cfg: snapshot,
        seed,
        out,
        verbose: opts.verbose,
        files: Vec::new(),
    };
    let outputs: &[&str] = match cmd {
        Command::Pretrain | Command::Graft => &[VOCAB_FILE, METRICS_FILE, CHECKPOINTS_DIR, UTILIZATION_CSV, STALENESS_CSV],
        Command::Finetune => &[VOCAB_FILE, FINETUNE_JSON, UTILIZATION_CSV, CHECKPOINTS_DIR],
        Command::Analyze => &[ANALYSIS_JSON, UTILIZATION_CSV],
        Command::Classdiv => &[CLASSDIV_CSV],
        Command::Bench => &[BENCH_CSV],
    };
    let manifest = RunManifest::new(cmd.name(), seed, &opts.config, &ctx.cfg, &ctx.out, outputs)?;
    let p = ctx.path(RUN_MANIFEST);
    write_json(&p, &manifest)?;

    match cmd {
        Command::Pretrain => run_pretrain(&mut ctx)?,
        Command::Graft => run_graft(&mut ctx)?,
        Command::Finetune => run_finetune(&mut ctx)?,
        Command::Analyze => run_analyze(&mut ctx)?,
        Command::Classdiv => run_classdiv(&mut ctx)?,
        Command::Bench => run_bench_cmd(&mut ctx)?,
    }
    Ok(RunSummary {
        out_dir: ctx.out,
        files: ctx.files,
    })
}

fn encode_corpus(ctx: &Ctx, vocab: &Vocab) -> Result<Corpus> {
    let lines = read_lines(RunConfig::require(&ctx.cfg.corpus, "corpus")?)?;
    let encoded: Vec<Vec<u32>> = lines.iter().map(|l| vocab.encode(l)).collect();
    Ok(Corpus::from_lines(&encoded))
}

fn train_and_report(ctx: &mut Ctx, model: Encoder<f32>, corpus: &Corpus, train: &TrainConfig) -> Result<PretrainOutcome> {
    let verbose = ctx.verbose;
    let name = ctx.cmd.name();
    let mut progress = |r: &EvalRecord| {
        if verbose {
            eprintln!("[{name}] step {} train {:.4} eval {:.4} ppl {:.2}", r.step, r.train_loss, r.mlm_loss, r.ppl);
        }
    };
    ctx.files.push(ctx.out.join(METRICS_FILE));
    ctx.files.push(ctx.out.join(CHECKPOINTS_DIR));
    let outcome = pretrain(
        model,
        corpus,
        train,
        RunHooks {
            out_dir: Some(&ctx.out),
            on_eval: Some(&mut progress),
            keep_touched: false,
        },
    )?;

    let util: Vec<UtilizationCsvRow> = outcome
        .evals
        .iter()
        .flat_map(|e| e.utilization.iter().map(move |u| UtilizationCsvRow::new(e.step, u)))
        .collect();
    let p = ctx.path(UTILIZATION_CSV);
    write_csv(&p, &util)?;

    let steps: Vec<usize> = outcome.checkpoints.iter().map(|c| c.0).collect();
    let mut stale = Vec::new();
    if !outcome.intervals.is_empty() {
        for layer in outcome.model.config.active_memory_layers() {
            for kind in [UsageKind::Top1, UsageKind::TopK] {
                stale.extend(staleness_rows(layer, kind, &outcome.staleness(layer, kind)?, &steps));
            }
        }
    }
    let p = ctx.path(STALENESS_CSV);
    write_csv(&p, &stale)?;
    Ok(outcome)
}

fn run_pretrain(ctx: &mut Ctx) -> Result<()> {
    let train = ctx.train()?;
    let vocab = match ctx.find_vocab(None)? {
        Some(v) => v,
        None => Vocab::build(&read_lines(RunConfig::require(&ctx.cfg.corpus, "corpus")?)?, &ctx.cfg.tokenizer)?,
    };
    ctx.save_vocab(&vocab)?;
    let corpus = encode_corpus(ctx, &vocab)?;
    let mut model_cfg = model_config(&ctx.cfg.model, &vocab)?;
    model_cfg.memory_block = train.variant.block();
    let model = Encoder::new(model_cfg, &mut rng_from_seed(derive_seed(ctx.seed, "init")))?;
    train_and_report(ctx, model, &corpus, &train)?;
    Ok(())
}

fn run_graft(ctx: &mut Ctx) -> Result<()> {
    let train = ctx.train()?;
    if train.variant == ModelVariant::Ffn {
        bail!("graft needs a memory variant (train.variant)");
    }
    let base_dir = RunConfig::require(&train.init_from, "train.init_from")?.to_path_buf();
    let (base, _) = load_checkpoint(&base_dir)?;
    let vocab = ctx
        .find_vocab(Some(&base_dir))?
        .with_context(|| format!("no {VOCAB_FILE} found for {}", base_dir.display()))?;
    check_vocab(&base, &vocab)?;
    ctx.save_vocab(&vocab)?;
    let corpus = encode_corpus(ctx, &vocab)?;
    // Trunk shape comes from the base; memory settings from this config.
    let mut target = base.config.clone();
    target.memory_layers = ctx.cfg.model.memory_layers.clone();
    target.memory = ctx.cfg.model.memory.clone();
    target.dropout = ctx.cfg.model.dropout;
    let model = init_from_pretrained(&base, &target, train.variant, &mut rng_from_seed(derive_seed(ctx.seed, "init")))?;
    train_and_report(ctx, model, &corpus, &train)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub labels: Vec<String>,
    pub steps: usize,
    pub initial_accuracy: f64,
    pub accuracy: f64,
    pub final_loss: Option<f64>,
    pub utilization: Vec<pkmlab::metrics::UtilizationRow>,
}

fn run_finetune(ctx: &mut Ctx) -> Result<()> {
    let train = ctx.train()?;
    let labeled = LabeledText::read(RunConfig::require(&ctx.cfg.labeled, "labeled")?)?;
    let (model, vocab) = match &train.init_from {
        Some(dir) => {
            let (model, _) = load_checkpoint(dir)?;
            let vocab = ctx.find_vocab(Some(dir))?.with_context(|| format!("no {VOCAB_FILE} found for {}", dir.display()))?;
            check_vocab(&model, &vocab)?;
            (model, vocab)
        }
        None => {
            let vocab = match ctx.find_vocab(None)? {
                Some(v) => v,
                None => Vocab::build(&labeled.texts(), &ctx.cfg.tokenizer)?,
            };
            let cfg = model_config(&ctx.cfg.model, &vocab)?;
            (Encoder::new(cfg, &mut rng_from_seed(derive_seed(ctx.seed, "init")))?, vocab)
        }
    };
    ctx.save_vocab(&vocab)?;
    let examples = labeled.encode(&vocab);
    let out = finetune(model, &examples, &train)?;
    let report = FinetuneReport {
        labels: labeled.labels.clone(),
        steps: train.steps,
        initial_accuracy: out.initial_accuracy,
        accuracy: out.accuracy,
        final_loss: out.losses.last().copied(),
        utilization: out.utilization.clone(),
    };
    let p = ctx.path(FINETUNE_JSON);
    write_json(&p, &report)?;
    let util: Vec<_> = out.utilization.iter().map(|u| UtilizationCsvRow::new(train.steps, u)).collect();
    let p = ctx.path(UTILIZATION_CSV);
    write_csv(&p, &util)?;
    let dir = checkpoint_dir(&ctx.out.join(CHECKPOINTS_DIR), train.steps as u64);
    save_checkpoint(&out.model, train.steps as u64, &dir)?;
    ctx.files.push(dir);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub checkpoint: PathBuf,
    pub step: u64,
    pub batches: usize,
    pub mlm_loss: f64,
    pub ppl: f64,
    pub utilization: Vec<pkmlab::metrics::UtilizationRow>,
}

fn load_with_vocab(ctx: &Ctx) -> Result<(PathBuf, Encoder<f32>, u64, Vocab)> {
    let dir = RunConfig::require(&ctx.cfg.checkpoint, "checkpoint")?.to_path_buf();
    let (model, manifest) = load_checkpoint(&dir)?;
    let vocab = ctx.find_vocab(Some(&dir))?.with_context(|| format!("no {VOCAB_FILE} found for {}", dir.display()))?;
    check_vocab(&model, &vocab)?;
    Ok((dir, model, manifest.step, vocab))
}

fn run_analyze(ctx: &mut Ctx) -> Result<()> {
    let (dir, model, step, vocab) = load_with_vocab(ctx)?;
    let train = ctx.train_or_default();
    let lines = read_lines(RunConfig::require(&ctx.cfg.corpus, "corpus")?)?;
    let stream: Vec<u32> = lines.iter().flat_map(|l| vocab.encode(l)).collect();
    let seq = train.seq_len.min(model.config.max_len);
    let batches = eval_batches(
        &stream,
        train.batch_size,
        seq,
        train.eval_batches,
        model.config.vocab_size,
        train.mask_prob,
        &mut rng_from_seed(derive_seed(ctx.seed, "eval")),
    )?;
    let ev = evaluate(&model, &batches)?;
    let report = AnalysisReport {
        checkpoint: dir,
        step,
        batches: batches.len(),
        mlm_loss: ev.loss,
        ppl: ev.ppl,
        utilization: ev.utilization()?,
    };
    let p = ctx.path(ANALYSIS_JSON);
    write_json(&p, &report)?;
    let util: Vec<_> = report.utilization.iter().map(|u| UtilizationCsvRow::new(step as usize, u)).collect();
    let p = ctx.path(UTILIZATION_CSV);
    write_csv(&p, &util)
}

fn run_classdiv(ctx: &mut Ctx) -> Result<()> {
    let (_, model, _, vocab) = load_with_vocab(ctx)?;
    let labeled = LabeledText::read(RunConfig::require(&ctx.cfg.labeled, "labeled")?)?;
    let examples = labeled.encode(&vocab);
    let batch = ctx.train_or_default().batch_size;
    let usage = usage_by_class(&model, &examples, labeled.labels.len(), batch)?;
    let mut rows = Vec::new();
    for (layer, logs) in usage {
        for a in 0..logs.len() {
            for b in a + 1..logs.len() {
                let ua = ClassUsage::from_counts(&logs[a].t).with_context(|| format!("class {}", labeled.labels[a]))?;
                let ub = ClassUsage::from_counts(&logs[b].t).with_context(|| format!("class {}", labeled.labels[b]))?;
                let (kl, iou) = class_divergence(&ua, &ub)?;
                rows.push(ClassDivRow {
                    layer,
                    class_a: labeled.labels[a].clone(),
                    class_b: labeled.labels[b].clone(),
                    kl,
                    iou,
                });
            }
        }
    }
    let p = ctx.path(CLASSDIV_CSV);
    write_csv(&p, &rows)
}

fn run_bench_cmd(ctx: &mut Ctx) -> Result<()> {
    let rows = run_bench(&ctx.cfg.bench, ctx.seed)?;
    let p = ctx.path(BENCH_CSV);
    write_csv(&p, &rows)
}
