use rand::Rng as _;

use crate::encoder::{mlm_mask, MaskRule, MlmBatch, TokenBatch};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Every 20th line (the 20th, 40th, ...) is held out for evaluation.
pub const EVAL_EVERY: usize = 20;

/// Token streams of a tokenized corpus, split into training and held-out text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<u32>,
    pub eval: Vec<u32>,
}

impl Corpus {
    pub fn from_lines(lines: &[Vec<u32>]) -> Self {
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for (i, line) in lines.iter().enumerate() {
            if i % EVAL_EVERY == EVAL_EVERY - 1 {
                eval.extend_from_slice(line);
            } else {
                train.extend_from_slice(line);
            }
        }
        Self { train, eval }
    }
}

/// `batch` windows of length `seq` at uniformly random offsets of `stream`.
pub fn sample_windows(stream: &[u32], batch: usize, seq: usize, rng: &mut Rng) -> Result<TokenBatch> {
    if stream.len() < batch * seq || stream.len() < seq {
        return Err(Error::CorpusTooSmall {
            tokens: stream.len(),
            needed: batch * seq,
        });
    }
    let mut tokens = Vec::with_capacity(batch * seq);
    for _ in 0..batch {
        let start = rng.random_range(0..=stream.len() - seq);
        tokens.extend_from_slice(&stream[start..start + seq]);
    }
    TokenBatch::new(tokens, batch, seq)
}

/// Masked training batch; re-draws the mask until at least one target exists.
pub fn sample_mlm_batch(
    stream: &[u32],
    batch: usize,
    seq: usize,
    vocab: usize,
    mask_prob: f64,
    rng: &mut Rng,
) -> Result<MlmBatch> {
    let tokens = sample_windows(stream, batch, seq, rng)?;
    if mask_prob == 0.0 {
        return Err(Error::EmptyTargets);
    }
    loop {
        let m = mlm_mask(&tokens, vocab, mask_prob, MaskRule::default(), rng)?;
        if !m.positions.is_empty() {
            return Ok(m);
        }
    }
}

/// Fixed held-out batches: consecutive non-overlapping windows, masked once with `rng`.
///
/// A stream shorter than `seq` becomes a single shorter window.
pub fn eval_batches(
    stream: &[u32],
    batch: usize,
    seq: usize,
    n_batches: usize,
    vocab: usize,
    mask_prob: f64,
    rng: &mut Rng,
) -> Result<Vec<MlmBatch>> {
    if stream.is_empty() {
        return Err(Error::CorpusTooSmall { tokens: 0, needed: seq });
    }
    let seq = seq.min(stream.len());
    let windows: Vec<&[u32]> = stream.chunks_exact(seq).take(batch * n_batches).collect();
    let mut out = Vec::new();
    for group in windows.chunks(batch) {
        let tokens = TokenBatch::new(group.concat(), group.len(), seq)?;
        let m = mlm_mask(&tokens, vocab, mask_prob, MaskRule::default(), rng)?;
        if !m.positions.is_empty() {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyTargets);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_from_seed;

    #[test]
    fn split_holds_out_every_twentieth_line() {
        let lines: Vec<Vec<u32>> = (0..40).map(|i| vec![i]).collect();
        let c = Corpus::from_lines(&lines);
        assert_eq!(c.eval, vec![19, 39]);
        assert_eq!(c.train.len(), 38);
    }

    #[test]
    fn windows_come_from_the_stream() {
        let stream: Vec<u32> = (4..104).collect();
        let b = sample_windows(&stream, 3, 10, &mut rng_from_seed(1)).unwrap();
        for r in 0..3 {
            let row = b.row(r);
            assert!(row.windows(2).all(|w| w[1] == w[0] + 1));
        }
        assert!(sample_windows(&stream[..5], 1, 10, &mut rng_from_seed(1)).is_err());
    }

    #[test]
    fn eval_batches_are_deterministic() {
        let stream: Vec<u32> = (0..500).map(|i| 4 + i % 50).collect();
        let a = eval_batches(&stream, 4, 16, 3, 60, 0.15, &mut rng_from_seed(2)).unwrap();
        let b = eval_batches(&stream, 4, 16, 3, 60, 0.15, &mut rng_from_seed(2)).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 3);
        let short = eval_batches(&stream[..5], 4, 16, 3, 60, 1.0, &mut rng_from_seed(2)).unwrap();
        assert_eq!(short[0].input.seq, 5);
    }
}
