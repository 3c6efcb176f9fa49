//! Forward-pass timings: memory-block variants and key search strategies.

use std::hint::black_box;
use std::time::Instant;

use anyhow::{bail, Result};
use pkmlab::encoder::{BlockVariant, MemoryBlock};
use pkmlab::numerics::{rng_from_seed, Tensor};
use pkmlab::pkm::{exhaustive_topk, product_topk, split_query, MemoryConfig, NormMode, ValueInit};
use serde::{Deserialize, Serialize};

pub const MIN_ITERATIONS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "d_model")]
    pub d_model: usize,
    #[serde(default = "ffn_dim")]
    pub ffn_dim: usize,
    /// Rows per forward batch (batch × sequence length).
    #[serde(default = "tokens")]
    pub tokens: usize,
    #[serde(default = "memory")]
    pub memory: MemoryConfig,
    /// Codebook sizes for the search comparison.
    #[serde(default = "search_keys")]
    pub search_keys: Vec<usize>,
    #[serde(default = "search_knn")]
    pub search_knn: usize,
    #[serde(default = "search_dim")]
    pub search_dim: usize,
    #[serde(default = "search_queries")]
    pub search_queries: usize,
    #[serde(default = "iterations")]
    pub iterations: usize,
    #[serde(default = "warmup")]
    pub warmup: usize,
}

fn d_model() -> usize {
    128
}
fn ffn_dim() -> usize {
    512
}
fn tokens() -> usize {
    512
}
fn memory() -> MemoryConfig {
    MemoryConfig {
        n_keys: 128,
        heads: 4,
        knn: 32,
        k_dim: 256,
        v_dim: 128,
        batch_norm: true,
        value_init: ValueInit::Gaussian,
    }
}
fn search_keys() -> Vec<usize> {
    vec![128, 256]
}
fn search_knn() -> usize {
    8
}
fn search_dim() -> usize {
    256
}
fn search_queries() -> usize {
    32
}
fn iterations() -> usize {
    MIN_ITERATIONS
}
fn warmup() -> usize {
    3
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            d_model: d_model(),
            ffn_dim: ffn_dim(),
            tokens: tokens(),
            memory: memory(),
            search_keys: search_keys(),
            search_knn: search_knn(),
            search_dim: search_dim(),
            search_queries: search_queries(),
            iterations: iterations(),
            warmup: warmup(),
        }
    }
}

/// One line of `bench.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    /// `block` or `search`.
    pub group: String,
    pub variant: String,
    pub n_keys: usize,
    pub knn: usize,
    /// Rows (block) or queries (search) per timed call.
    pub batch: usize,
    pub iterations: usize,
    pub median_ms: f64,
}

fn block_name(v: BlockVariant) -> &'static str {
    match v {
        BlockVariant::Ffn => "ffn",
        BlockVariant::Pkm => "pkm",
        BlockVariant::Resm => "resm",
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Runs every case `warmup + iterations` times, round-robin, and keeps the
/// median of the timed rounds.
fn interleaved(cases: &mut [Box<dyn FnMut() + '_>], warmup: usize, iterations: usize) -> Vec<f64> {
    let mut times = vec![Vec::with_capacity(iterations); cases.len()];
    for round in 0..warmup + iterations {
        for (case, t) in cases.iter_mut().zip(&mut times) {
            let start = Instant::now();
            case();
            if round >= warmup {
                t.push(start.elapsed().as_secs_f64() * 1e3);
            }
        }
    }
    times.into_iter().map(median).collect()
}

pub fn run_bench(cfg: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    if cfg.iterations < MIN_ITERATIONS {
        bail!("bench.iterations must be at least {MIN_ITERATIONS}");
    }
    if cfg.search_dim % 2 != 0 || cfg.search_dim == 0 {
        bail!("bench.search_dim must be even and positive");
    }
    let mut rng = rng_from_seed(seed);
    let mut rows = Vec::new();

    let variants = [BlockVariant::Ffn, BlockVariant::Pkm, BlockVariant::Resm];
    let blocks = variants
        .iter()
        .map(|&v| MemoryBlock::<f32>::new(cfg.d_model, cfg.ffn_dim, v, &cfg.memory, 0.02, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let x = Tensor::<f32>::randn(&[cfg.tokens, cfg.d_model], 1.0, &mut rng);
    let mut cases: Vec<Box<dyn FnMut()>> = blocks
        .iter()
        .map(|b| {
            let x = x.data();
            Box::new(move || {
                black_box(b.forward(black_box(x), NormMode::Running, 0.0, None).expect("block forward"));
            }) as Box<dyn FnMut()>
        })
        .collect();
    let medians = interleaved(&mut cases, cfg.warmup, cfg.iterations);
    drop(cases);
    for (v, m) in variants.iter().zip(medians) {
        rows.push(BenchRow {
            group: "block".into(),
            variant: block_name(*v).into(),
            n_keys: cfg.memory.n_keys,
            knn: cfg.memory.knn,
            batch: cfg.tokens,
            iterations: cfg.iterations,
            median_ms: m,
        });
    }

    for &c in &cfg.search_keys {
        if cfg.search_knn > c * c || cfg.search_knn == 0 {
            bail!("bench.search_knn must be in 1..={}", c * c);
        }
        let half = cfg.search_dim / 2;
        let k1 = Tensor::<f32>::randn(&[c, half], 1.0, &mut rng);
        let k2 = Tensor::<f32>::randn(&[c, half], 1.0, &mut rng);
        let q = Tensor::<f32>::randn(&[cfg.search_queries, cfg.search_dim], 1.0, &mut rng);
        let (k1, k2, q, knn) = (&k1, &k2, &q, cfg.search_knn);
        let mut cases: Vec<Box<dyn FnMut()>> = vec![
            Box::new(move || {
                for r in 0..q.rows() {
                    let (a, b) = split_query(q.row(r)).expect("even query");
                    black_box(product_topk(a, b, k1, k2, knn).expect("product search"));
                }
            }),
            Box::new(move || {
                for r in 0..q.rows() {
                    black_box(exhaustive_topk(q.row(r), k1, k2, knn).expect("exhaustive search"));
                }
            }),
        ];
        let medians = interleaved(&mut cases, cfg.warmup, cfg.iterations);
        for (name, m) in ["product_key", "exhaustive"].into_iter().zip(medians) {
            rows.push(BenchRow {
                group: "search".into(),
                variant: name.into(),
                n_keys: c,
                knn,
                batch: cfg.search_queries,
                iterations: cfg.iterations,
                median_ms: m,
            });
        }
    }
    Ok(rows)
}
