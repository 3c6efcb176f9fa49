mod common;

use std::collections::BTreeSet;
use std::fs;

use common::{separable_task, template_lines, tiny_encoder, TINY_VOCAB};
use pkmlab::encoder::{BlockVariant, Encoder, Phase, TokenBatch};
use pkmlab::numerics::{derive_seed, rng_from_seed, AdamParams};
use pkmlab::params::{get_param, named_tensors, Parameters};
use pkmlab::pkm::{SparseOptimizerKind, ValueInit};
use pkmlab::train::{
    evaluate, finetune, heldout_batches, init_from_pretrained, load_checkpoint, pretrain, sample_mlm_batch, save_checkpoint,
    Corpus, LabeledExample, ModelVariant, Optimizer, RunHooks, TrainConfig, CHECKPOINTS_DIR, MANIFEST_FILE, METRICS_FILE,
    PARAMS_FILE,
};
use pkmlab::Error;

fn small_train(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        seq_len: 16,
        lr: 3e-3,
        warmup: Some(steps / 10),
        seed: 3,
        checkpoint_interval: Some(50),
        eval_interval: Some(50),
        eval_batches: 2,
        ..TrainConfig::default()
    }
}

fn model(variant: BlockVariant, seed: u64) -> Encoder<f32> {
    Encoder::new(tiny_encoder(variant), &mut rng_from_seed(seed)).unwrap()
}

fn corpus() -> Corpus {
    Corpus::from_lines(&template_lines(64, 1))
}

fn memory_hash(m: &Encoder<f32>) -> Vec<(String, Vec<u32>)> {
    named_tensors(m)
        .into_iter()
        .filter(|(n, _, _)| n.contains("block.memory."))
        .map(|(n, _, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

// ---------- pretrain ----------

#[test]
fn zero_steps_emit_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain(
        model(BlockVariant::Resm, 1),
        &corpus(),
        &small_train(0),
        RunHooks {
            out_dir: Some(dir.path()),
            ..RunHooks::default()
        },
    )
    .unwrap();
    assert!(out.evals.is_empty());
    assert_eq!(out.checkpoints.len(), 1);
    assert_eq!(out.checkpoints[0].0, 0);
    assert_eq!(fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap(), "");
    let ckpts: Vec<_> = fs::read_dir(dir.path().join(CHECKPOINTS_DIR)).unwrap().collect();
    assert_eq!(ckpts.len(), 1);
}

#[test]
fn short_run_fits_tiny_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_train(200);
    let out = pretrain(
        model(BlockVariant::Resm, 2),
        &corpus(),
        &cfg,
        RunHooks {
            out_dir: Some(dir.path()),
            ..RunHooks::default()
        },
    )
    .unwrap();
    let head: f64 = out.train_losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = out.train_losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "loss {head} -> {tail}");
    assert_eq!(out.evals.len(), 4);
    assert!(out.evals.last().unwrap().mlm_loss < out.evals[0].mlm_loss + 1.0);
    let lines = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(lines.lines().count(), 4);
    for l in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["ppl"].as_f64().unwrap() > 1.0);
        let u = &v["utilization"][0];
        for k in ["layer", "MU", "MU_top1", "KL_u", "KL_w"] {
            assert!(u.get(k).is_some(), "{k}");
        }
    }
    // 0, 50, 100, 150, 200
    assert_eq!(out.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(), vec![0, 50, 100, 150, 200]);
    let h = out.staleness(2, pkmlab::metrics::UsageKind::Top1).unwrap();
    assert_eq!(h.buckets.len(), 4);
    assert_eq!(h.total(), 64);
}

#[test]
fn identical_seeds_give_identical_loss_curves() {
    let run = || pretrain(model(BlockVariant::Pkm, 4), &corpus(), &small_train(30), RunHooks::default()).unwrap();
    let (a, b) = (run(), run());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.train_losses), bits(&b.train_losses));
    assert_eq!(named_tensors(&a.model), named_tensors(&b.model));
}

#[test]
fn corpus_smaller_than_a_batch_is_rejected() {
    let tiny = Corpus::from_lines(&template_lines(10, 1));
    assert!(matches!(
        pretrain(model(BlockVariant::Ffn, 1), &tiny, &small_train(5), RunHooks::default()),
        Err(Error::CorpusTooSmall { .. })
    ));
}

type Rows = BTreeSet<usize>;

fn fuzz_value_updates(memory_layer: usize, mut check: impl FnMut(SparseOptimizerKind, &Rows, &Rows, &Rows, &Rows)) {
    let name = format!("layers.{}.block.memory.values", memory_layer - 1);
    for kind in [SparseOptimizerKind::Adam, SparseOptimizerKind::Sgd] {
        let mut cfg = tiny_encoder(BlockVariant::Resm);
        cfg.memory_layers = vec![memory_layer];
        let mut m = Encoder::<f32>::new(cfg, &mut rng_from_seed(5)).unwrap();
        let c = corpus();
        let mut opt = Optimizer::new(AdamParams::default(), kind);
        let mut rng = rng_from_seed(6);
        for _ in 0..100 {
            let before = get_param(&m, &name).unwrap();
            let batch = sample_mlm_batch(&c.train, 4, 16, TINY_VOCAB, 0.15, &mut rng).unwrap();
            let out = m.mlm_step(&batch, Phase::Train, Some(&mut rng)).unwrap();
            m.update_norm_stats(&out.cache);
            let accessed: BTreeSet<usize> = out.accesses[0].access.indices.iter().map(|&i| i as usize).collect();
            let g = &out.grads.sparse[&name];
            let nonzero: BTreeSet<usize> = g
                .rows
                .iter()
                .enumerate()
                .filter(|(i, _)| g.row_grad(*i).iter().any(|v| *v != 0.0))
                .map(|(_, &r)| r)
                .collect();
            let touched: BTreeSet<usize> = opt.step(&mut m, &out.grads, 1e-3, 1e-2).unwrap()[&name].iter().copied().collect();
            let after = get_param(&m, &name).unwrap();
            let changed: BTreeSet<usize> = (0..before.rows())
                .filter(|&r| before.row(r).iter().zip(after.row(r)).any(|(a, b)| a.to_bits() != b.to_bits()))
                .collect();
            check(kind, &accessed, &touched, &nonzero, &changed);
        }
    }
}

// Rows read only by sequences without a masked target get an all-zero
// gradient; plain SGD and first-touch Adam leave them bitwise unchanged.
// SGD steps far below one ulp round away as well.
#[test]
fn value_updates_stay_within_the_accessed_rows() {
    for layer in [1, 2] {
        fuzz_value_updates(layer, |kind, accessed, touched, nonzero, changed| {
            assert_eq!(touched, accessed);
            if kind == SparseOptimizerKind::Adam {
                assert!(nonzero.is_subset(changed), "layer {layer}");
            }
            assert!(changed.is_subset(accessed), "layer {layer}");
        });
    }
}

// ---------- grafting ----------

fn graft_corpus() -> Corpus {
    Corpus::from_lines(&template_lines(400, 2))
}

fn trained_base() -> Encoder<f32> {
    let cfg = TrainConfig {
        eval_interval: Some(1000),
        checkpoint_interval: Some(1000),
        ..small_train(1000)
    };
    pretrain(model(BlockVariant::Ffn, 7), &graft_corpus(), &cfg, RunHooks::default()).unwrap().model
}

#[test]
fn zero_value_resm_graft_reproduces_base_logits() {
    let base = trained_base();
    let mut target = tiny_encoder(BlockVariant::Resm);
    target.memory.value_init = ValueInit::Zeros;
    let grafted = init_from_pretrained(&base, &target, ModelVariant::Resm, &mut rng_from_seed(8)).unwrap();
    let c = corpus();
    let mut rng = rng_from_seed(9);
    for _ in 0..10 {
        let b = sample_mlm_batch(&c.train, 4, 16, TINY_VOCAB, 0.15, &mut rng).unwrap();
        let ha = base.forward(&b.input, Phase::Eval, None).unwrap();
        let hb = grafted.forward(&b.input, Phase::Eval, None).unwrap();
        let (la, _) = base.mlm_logits(&ha.hidden, &b.positions);
        let (lb, _) = grafted.mlm_logits(&hb.hidden, &b.positions);
        let diff = la.iter().zip(&lb).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-4, "{diff}");
        assert_eq!(hb.accesses.len(), 1);
    }
}

#[test]
fn pkm_graft_starts_worse_than_resm_graft() {
    let base = trained_base();
    let target = tiny_encoder(BlockVariant::Resm);
    let c = graft_corpus();
    let heldout = heldout_batches(&base, &c, &small_train(10)).unwrap();
    let pkm = init_from_pretrained(&base, &target, ModelVariant::Pkm, &mut rng_from_seed(10)).unwrap();
    let resm = init_from_pretrained(&base, &target, ModelVariant::Resm, &mut rng_from_seed(10)).unwrap();
    assert!(pkm.layers[1].block.ffn.is_none());
    let base_loss = evaluate(&base, &heldout).unwrap().loss;
    let pkm_loss = evaluate(&pkm, &heldout).unwrap().loss;
    let resm_loss = evaluate(&resm, &heldout).unwrap().loss;
    eprintln!("base {base_loss} pkm {pkm_loss} resm {resm_loss}");
    assert!(pkm_loss > resm_loss, "pkm {pkm_loss} resm {resm_loss}");
    assert!(pkm_loss > base_loss);
}

#[test]
fn grafting_copies_trunk_and_is_idempotent() {
    let base = model(BlockVariant::Ffn, 11);
    let target = tiny_encoder(BlockVariant::Resm);
    let a = init_from_pretrained(&base, &target, ModelVariant::Resm, &mut rng_from_seed(1)).unwrap();
    let b = init_from_pretrained(&base, &target, ModelVariant::Resm, &mut rng_from_seed(2)).unwrap();
    let reinit = init_from_pretrained(&base, &target, ModelVariant::ResmReinitFfn, &mut rng_from_seed(3)).unwrap();
    for (name, _, t) in named_tensors(&base) {
        assert_eq!(get_param(&a, &name).unwrap(), t, "{name}");
        assert_eq!(get_param(&b, &name).unwrap(), t, "{name}");
        let r = get_param(&reinit, &name).unwrap();
        if name.starts_with("layers.1.block.ffn.") && name.ends_with("weight") {
            assert_ne!(r, t, "{name} should be re-initialized");
        } else if !name.starts_with("layers.1.block.ffn.") {
            assert_eq!(r, t, "{name}");
        }
    }
    assert_ne!(
        get_param(&a, "layers.1.block.memory.keys1").unwrap(),
        get_param(&b, "layers.1.block.memory.keys1").unwrap()
    );
}

#[test]
fn grafting_rejects_incompatible_bases() {
    let with_memory = model(BlockVariant::Resm, 1);
    let target = tiny_encoder(BlockVariant::Resm);
    assert!(init_from_pretrained(&with_memory, &target, ModelVariant::Resm, &mut rng_from_seed(0)).is_err());
    let base = model(BlockVariant::Ffn, 1);
    let mut wide = target.clone();
    wide.ffn_dim = 128;
    assert!(matches!(
        init_from_pretrained(&base, &wide, ModelVariant::Resm, &mut rng_from_seed(0)),
        Err(Error::ShapeMismatch { .. })
    ));
}

// ---------- finetune ----------

fn finetune_cfg(steps: usize, lr: f64, freeze: bool) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 16,
        lr,
        warmup: Some(0),
        seed: 12,
        freeze_memory: freeze,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_task_is_learned_frozen_and_unfrozen() {
    let data = separable_task(400, 13);
    for freeze in [false, true] {
        let m = model(BlockVariant::Resm, 14);
        let before = memory_hash(&m);
        let out = finetune(m, &data, &finetune_cfg(500, 1e-3, freeze)).unwrap();
        assert!(out.accuracy > 0.95, "freeze={freeze}: {}", out.accuracy);
        assert_eq!(memory_hash(&out.model) == before, freeze);
        assert_eq!(out.utilization.len(), 1);
    }
}

#[test]
fn zero_learning_rate_keeps_accuracy() {
    let data = separable_task(100, 15);
    let out = finetune(model(BlockVariant::Pkm, 16), &data, &finetune_cfg(20, 0.0, false)).unwrap();
    assert_eq!(out.accuracy, out.initial_accuracy);
}

#[test]
fn single_class_dataset_is_rejected() {
    let data: Vec<LabeledExample> = (0..10)
        .map(|_| LabeledExample {
            tokens: vec![5, 6],
            label: 1,
        })
        .collect();
    assert!(matches!(
        finetune(model(BlockVariant::Ffn, 1), &data, &finetune_cfg(5, 1e-3, false)),
        Err(Error::SingleClass)
    ));
}

// ---------- checkpoints ----------

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = rng_from_seed(derive_seed(17, "x"));
    let mut m = model(BlockVariant::Resm, 17);
    // Non-trivial running statistics.
    let c = corpus();
    let b = sample_mlm_batch(&c.train, 4, 16, TINY_VOCAB, 0.15, &mut rng).unwrap();
    let out = m.mlm_step(&b, Phase::Train, None).unwrap();
    m.update_norm_stats(&out.cache);

    let (d1, d2) = (dir.path().join("a"), dir.path().join("b"));
    save_checkpoint(&m, 42, &d1).unwrap();
    let (loaded, manifest) = load_checkpoint(&d1).unwrap();
    assert_eq!(manifest.step, 42);
    save_checkpoint(&loaded, 42, &d2).unwrap();
    for f in [MANIFEST_FILE, PARAMS_FILE] {
        assert_eq!(fs::read(d1.join(f)).unwrap(), fs::read(d2.join(f)).unwrap(), "{f}");
    }
    let tokens = TokenBatch::new(c.train[..32].to_vec(), 2, 16).unwrap();
    let ha = m.forward(&tokens, Phase::Eval, None).unwrap().hidden;
    let hb = loaded.forward(&tokens, Phase::Eval, None).unwrap().hidden;
    assert_eq!(ha, hb);
    let mut names = Vec::new();
    loaded.visit("", &mut |n, _, _| names.push(n.to_string()));
    assert!(names.iter().any(|n| n.ends_with("bn.running_var")));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(BlockVariant::Pkm, 18);
    save_checkpoint(&m, 0, dir.path()).unwrap();
    let blob = fs::read(dir.path().join(PARAMS_FILE)).unwrap();
    fs::write(dir.path().join(PARAMS_FILE), &blob[..blob.len() - 4]).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint { .. })));
    fs::write(dir.path().join(PARAMS_FILE), &blob).unwrap();
    let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    fs::write(dir.path().join(MANIFEST_FILE), text.replacen("\"version\": 1", "\"version\": 7", 1)).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::ManifestVersion(7))));
}
