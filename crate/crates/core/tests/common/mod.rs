#![allow(dead_code)]

use pkmlab::numerics::Tensor;

/// Entry-wise relative error with an absolute floor for near-zero entries.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Central finite differences of `f` with respect to every entry of `t`.
pub fn numeric_grad(t: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    (0..t.len())
        .map(|i| {
            let mut p = t.clone();
            p.data_mut()[i] += h;
            let mut m = t.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

pub fn weighted_sum(y: &[f64], w: &[f64]) -> f64 {
    y.iter().zip(w).map(|(a, b)| a * b).sum()
}

use pkmlab::encoder::{BlockVariant, EncoderConfig};
use pkmlab::numerics::rng_from_seed;
use pkmlab::pkm::{MemoryConfig, ValueInit};
use pkmlab::train::LabeledExample;
use rand::seq::SliceRandom as _;
use rand::Rng as _;

pub const TINY_VOCAB: usize = 40;

pub fn tiny_encoder(variant: BlockVariant) -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        d_model: 32,
        attn_heads: 2,
        ffn_dim: 64,
        vocab_size: TINY_VOCAB,
        max_len: 16,
        memory_layers: vec![2],
        memory_block: variant,
        memory: MemoryConfig {
            n_keys: 8,
            heads: 2,
            knn: 4,
            k_dim: 8,
            v_dim: 32,
            batch_norm: true,
            value_init: ValueInit::Gaussian,
        },
        dropout: 0.1,
        init_std: 0.02,
        n_classes: None,
    }
}

/// Lines of a tiny template language: each line is `subject verb object .`
/// where the verb determines the object's word family.
pub fn template_lines(n: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            let subj = 4 + rng.random_range(0..8u32);
            let verb = 12 + rng.random_range(0..4u32);
            let obj = 16 + (verb - 12) * 5 + rng.random_range(0..5u32);
            vec![subj, verb, obj, 36]
        })
        .collect()
}

/// Two classes: six of each example's eight tokens come from the class's own half
/// of the vocabulary, two from the other half.
pub fn separable_task(n: usize, seed: u64) -> Vec<LabeledExample> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let mut halves = [label, label, label, label, label, label, 1 - label, 1 - label];
            halves.shuffle(&mut rng);
            let tokens = halves.iter().map(|&h| 4 + h as u32 * 18 + rng.random_range(0..18u32)).collect();
            LabeledExample { tokens, label }
        })
        .collect()
}
