use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use pkmlab::encoder::{BlockVariant, EncoderConfig};
use pkmlab::pkm::{MemoryConfig, ValueInit};
use pkmlab::train::{checkpoint_dir, load_checkpoint, ModelVariant, TrainConfig, CHECKPOINTS_DIR, METRICS_FILE};
use pkmlab_cli::commands::AnalysisReport;
use pkmlab_cli::config::RunConfig;
use pkmlab_cli::data::{synthetic_corpus, synthetic_reviews};
use pkmlab_cli::report::*;
use pkmlab_cli::vocab::{TokenizerConfig, TokenizerMode, Vocab};
use pkmlab_cli::{run, Command, RunOptions};

fn tiny_model() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        d_model: 16,
        attn_heads: 2,
        ffn_dim: 32,
        vocab_size: 0,
        max_len: 16,
        memory_layers: vec![2],
        memory_block: BlockVariant::Ffn,
        memory: MemoryConfig {
            n_keys: 4,
            heads: 2,
            knn: 2,
            k_dim: 8,
            v_dim: 16,
            batch_norm: true,
            value_init: ValueInit::Gaussian,
        },
        dropout: 0.0,
        init_std: 0.02,
        n_classes: None,
    }
}

fn tiny_train(steps: usize, variant: ModelVariant) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        seq_len: 16,
        seed: 1,
        checkpoint_interval: Some(5),
        eval_interval: Some(5),
        eval_batches: 2,
        variant,
        ..TrainConfig::default()
    }
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synthetic_corpus(20_000, 30, 2).join("\n");
        fs::write(dir.path().join("corpus.txt"), corpus).unwrap();
        let reviews: String = synthetic_reviews(40, 3).iter().map(|(l, t)| format!("{l}\t{t}\n")).collect();
        fs::write(dir.path().join("reviews.tsv"), reviews).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Writes `cfg` next to the inputs, so relative paths resolve against the fixture.
    fn config(&self, name: &str, cfg: &RunConfig) -> PathBuf {
        let p = self.path(name);
        write_json(&p, cfg).unwrap();
        p
    }

    fn run(&self, cmd: Command, config: &str, cfg: &RunConfig, out: &str) -> PathBuf {
        let opts = RunOptions {
            out: Some(self.path(out)),
            ..RunOptions::new(self.config(config, cfg))
        };
        run(cmd, &opts).unwrap().out_dir
    }
}

fn pretrain_cfg(steps: usize, variant: ModelVariant) -> RunConfig {
    RunConfig {
        corpus: Some("corpus.txt".into()),
        model: tiny_model(),
        train: Some(tiny_train(steps, variant)),
        ..RunConfig::default()
    }
}

fn bin() -> Process {
    Process::new(env!("CARGO_BIN_EXE_pkmlab"))
}

#[test]
fn schema_errors_name_the_offending_field() {
    let f = Fixture::new();
    let p = f.path("bad.json");
    fs::write(&p, r#"{"model": {"memory": {"n_keys": "many"}}}"#).unwrap();
    let out = bin().args(["pretrain", "--config"]).arg(&p).arg("--out").arg(f.path("o")).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.memory.n_keys"), "{err}");

    fs::write(&p, r#"{"modle": {}}"#).unwrap();
    let out = bin().args(["analyze", "--config"]).arg(&p).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("modle"));
}

#[test]
fn missing_inputs_fail_after_the_manifest() {
    let f = Fixture::new();
    let cfg = f.config("empty.json", &RunConfig::default());
    let out = f.path("o");
    let err = run(Command::Analyze, &RunOptions { out: Some(out.clone()), ..RunOptions::new(&cfg) }).unwrap_err();
    assert!(format!("{err:#}").contains("checkpoint"), "{err:#}");
    let manifest: RunManifest = read_json(&out.join(RUN_MANIFEST)).unwrap();
    assert_eq!(manifest.command, "analyze");
    assert_eq!(manifest.config_sha256.len(), 64);
}

#[test]
fn pretrain_writes_manifest_metrics_and_checkpoints() {
    let f = Fixture::new();
    let out = f.run(Command::Pretrain, "p.json", &pretrain_cfg(10, ModelVariant::Resm), "pre");
    let manifest: RunManifest = read_json(&out.join(RUN_MANIFEST)).unwrap();
    assert_eq!(manifest.seed, 1);
    assert_eq!(manifest.config.corpus.as_deref(), Some(f.path("corpus.txt").as_path()));
    assert!(manifest.build.starts_with(env!("CARGO_PKG_VERSION")));
    for name in [VOCAB_FILE, METRICS_FILE, UTILIZATION_CSV, STALENESS_CSV] {
        assert!(out.join(name).is_file(), "{name}");
    }
    let ckpts = out.join(CHECKPOINTS_DIR);
    for step in [0, 5, 10] {
        assert!(checkpoint_dir(&ckpts, step).is_dir(), "step {step}");
    }
    let util: Vec<UtilizationCsvRow> = read_csv(&out.join(UTILIZATION_CSV)).unwrap();
    assert_eq!(util.iter().map(|r| r.step).collect::<Vec<_>>(), [5, 10]);
    let stale: Vec<StalenessCsvRow> = read_csv(&out.join(STALENESS_CSV)).unwrap();
    // Two kinds, one memory layer: per-checkpoint buckets plus a `never` row each.
    let top1: usize = stale.iter().filter(|r| r.kind == pkmlab::metrics::UsageKind::Top1).map(|r| r.count).sum();
    assert_eq!(top1, 16);
    assert!(stale.iter().any(|r| r.checkpoint_index.is_none()));
}

#[test]
fn seed_flag_overrides_config_and_changes_the_run() {
    let f = Fixture::new();
    let cfg = f.config("p.json", &pretrain_cfg(5, ModelVariant::Pkm));
    let go = |seed, out: &str| {
        let opts = RunOptions {
            out: Some(f.path(out)),
            seed,
            ..RunOptions::new(&cfg)
        };
        run(Command::Pretrain, &opts).unwrap();
        fs::read_to_string(f.path(out).join(METRICS_FILE)).unwrap()
    };
    assert_eq!(go(None, "a"), go(None, "b"));
    assert_ne!(go(None, "a"), go(Some(9), "c"));
    let manifest: RunManifest = read_json(&f.path("c").join(RUN_MANIFEST)).unwrap();
    assert_eq!(manifest.seed, 9);
    assert_eq!(manifest.config.train.unwrap().seed, 9);
}

#[test]
fn graft_chains_from_a_pretrained_trunk() {
    let f = Fixture::new();
    let trunk = f.run(Command::Pretrain, "t.json", &pretrain_cfg(5, ModelVariant::Ffn), "trunk");
    let mut cfg = pretrain_cfg(5, ModelVariant::Resm);
    cfg.train.as_mut().unwrap().init_from = Some(checkpoint_dir(&trunk.join(CHECKPOINTS_DIR), 5));
    let out = f.run(Command::Graft, "g.json", &cfg, "graft");
    assert_eq!(fs::read(trunk.join(VOCAB_FILE)).unwrap(), fs::read(out.join(VOCAB_FILE)).unwrap());
    let (model, _) = load_checkpoint(&checkpoint_dir(&out.join(CHECKPOINTS_DIR), 5)).unwrap();
    assert_eq!(model.config.memory_block, BlockVariant::Resm);

    // A memory checkpoint is not a valid grafting base.
    let mut again = cfg.clone();
    again.train.as_mut().unwrap().init_from = Some(checkpoint_dir(&out.join(CHECKPOINTS_DIR), 5));
    let opts = RunOptions {
        out: Some(f.path("again")),
        ..RunOptions::new(f.config("a.json", &again))
    };
    assert!(run(Command::Graft, &opts).is_err());

    let mut ffn = cfg;
    ffn.train.as_mut().unwrap().variant = ModelVariant::Ffn;
    let opts = RunOptions {
        out: Some(f.path("ffn")),
        ..RunOptions::new(f.config("f.json", &ffn))
    };
    assert!(format!("{:#}", run(Command::Graft, &opts).unwrap_err()).contains("memory variant"));
}

#[test]
fn analyze_reports_all_metrics_for_a_fresh_zero_value_checkpoint() {
    let f = Fixture::new();
    let mut cfg = pretrain_cfg(0, ModelVariant::Resm);
    cfg.model.memory.value_init = ValueInit::Zeros;
    let pre = f.run(Command::Pretrain, "p.json", &cfg, "pre");
    let analyze = RunConfig {
        corpus: Some("corpus.txt".into()),
        checkpoint: Some(checkpoint_dir(&pre.join(CHECKPOINTS_DIR), 0)),
        ..RunConfig::default()
    };
    let out = f.run(Command::Analyze, "a.json", &analyze, "an");
    let report: AnalysisReport = read_json(&out.join(ANALYSIS_JSON)).unwrap();
    assert_eq!(report.step, 0);
    assert!(report.ppl.is_finite() && report.ppl > 1.0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(ANALYSIS_JSON)).unwrap()).unwrap();
    let u = &v["utilization"][0];
    assert_eq!(u["layer"], 2);
    for k in ["MU", "MU_top1", "KL_u", "KL_w"] {
        assert!(u[k].as_f64().unwrap().is_finite(), "{k}");
    }
    assert!(u["MU_top1"].as_f64() <= u["MU"].as_f64());
    let rows: Vec<UtilizationCsvRow> = read_csv(&out.join(UTILIZATION_CSV)).unwrap();
    assert_eq!(rows.len(), 1);
}

#[test]
fn finetune_and_classdiv_on_labeled_text() {
    let f = Fixture::new();
    let mut model = tiny_model();
    model.memory_block = BlockVariant::Resm;
    let cfg = RunConfig {
        labeled: Some("reviews.tsv".into()),
        model,
        train: Some(TrainConfig {
            steps: 20,
            batch_size: 8,
            ..TrainConfig::default()
        }),
        ..RunConfig::default()
    };
    let ft = f.run(Command::Finetune, "ft.json", &cfg, "ft");
    let report: pkmlab_cli::commands::FinetuneReport = read_json(&ft.join(FINETUNE_JSON)).unwrap();
    assert_eq!(report.labels, ["neg", "pos"]);
    assert!(report.final_loss.is_some());

    let cd = RunConfig {
        labeled: Some("reviews.tsv".into()),
        checkpoint: Some(checkpoint_dir(&ft.join(CHECKPOINTS_DIR), 20)),
        ..RunConfig::default()
    };
    let out = f.run(Command::Classdiv, "cd.json", &cd, "cd");
    let rows: Vec<ClassDivRow> = read_csv(&out.join(CLASSDIV_CSV)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].class_a.as_str(), rows[0].class_b.as_str()), ("neg", "pos"));
    assert!(rows[0].kl >= 0.0 && (0.0..=1.0).contains(&rows[0].iou));
}

#[test]
fn vocabulary_is_deterministic_and_round_trips() {
    let lines = synthetic_corpus(5_000, 10, 4);
    let cfg = TokenizerConfig::default();
    let a = Vocab::build(&lines, &cfg).unwrap();
    let b = Vocab::build(&lines, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.json"), dir.path().join("b.json"));
    a.save(&pa).unwrap();
    b.save(&pb).unwrap();
    assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap());
    let loaded = Vocab::load(&pa).unwrap();
    assert_eq!(loaded.encode(&lines[0]), a.encode(&lines[0]));

    let chars = Vocab::build(
        &lines,
        &TokenizerConfig {
            mode: TokenizerMode::Char,
            ..cfg
        },
    )
    .unwrap();
    assert!(chars.len() < a.len());
}

#[test]
fn default_output_dir_honours_the_environment() {
    let f = Fixture::new();
    let cfg = f.config("b.json", &RunConfig::default());
    let out = f.path("from-env");
    let status = bin()
        .args(["classdiv", "--config"])
        .arg(&cfg)
        .env("PKMLAB_OUT", &out)
        .current_dir(f.dir.path())
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(Path::new(&out).join(RUN_MANIFEST).is_file());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        RunConfig::load(&p).unwrap_or_else(|e| panic!("{e}"));
        n += 1;
    }
    assert!(n >= 5);
}
