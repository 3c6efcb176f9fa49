use rand::Rng as _;

use super::config::special;
use super::model::TokenBatch;
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// How selected positions are corrupted; the remainder keeps the original token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskRule {
    pub mask: f64,
    pub random: f64,
}

impl Default for MaskRule {
    fn default() -> Self {
        Self { mask: 0.8, random: 0.1 }
    }
}

impl MaskRule {
    pub const ALWAYS_MASK: MaskRule = MaskRule { mask: 1.0, random: 0.0 };
}

/// A corrupted batch with its prediction targets.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmBatch {
    pub input: TokenBatch,
    /// Flat positions (`b·T + t`) to predict, ascending.
    pub positions: Vec<usize>,
    /// Original token ids at `positions`.
    pub targets: Vec<usize>,
}

/// Selects every non-special position with probability `mask_prob` and corrupts it per `rule`.
pub fn mlm_mask(tokens: &TokenBatch, vocab_size: usize, mask_prob: f64, rule: MaskRule, rng: &mut Rng) -> Result<MlmBatch> {
    if vocab_size <= special::MASK as usize {
        return Err(Error::NoMaskToken);
    }
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(Error::InvalidConfig(format!("mask_prob {mask_prob} not in [0, 1]")));
    }
    if rule.mask < 0.0 || rule.random < 0.0 || rule.mask + rule.random > 1.0 {
        return Err(Error::InvalidConfig(format!("mask rule {rule:?} is not a distribution")));
    }
    let ordinary = vocab_size.saturating_sub(special::COUNT as usize);
    if rule.random > 0.0 && ordinary == 0 {
        return Err(Error::InvalidConfig("random replacement needs ordinary tokens".into()));
    }
    let mut input = tokens.clone();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (i, tok) in input.tokens.iter_mut().enumerate() {
        if *tok == special::PAD || *tok == special::CLS {
            continue;
        }
        if rng.random::<f64>() >= mask_prob {
            continue;
        }
        positions.push(i);
        targets.push(*tok as usize);
        let r = rng.random::<f64>();
        if r < rule.mask {
            *tok = special::MASK;
        } else if r < rule.mask + rule.random {
            *tok = special::COUNT + rng.random_range(0..ordinary as u32);
        }
    }
    Ok(MlmBatch {
        input,
        positions,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_from_seed;

    fn batch(n: usize) -> TokenBatch {
        TokenBatch::new((0..n).map(|i| 4 + (i % 20) as u32).collect(), 1, n).unwrap()
    }

    #[test]
    fn zero_probability_selects_nothing() {
        let b = batch(50);
        let m = mlm_mask(&b, 30, 0.0, MaskRule::default(), &mut rng_from_seed(1)).unwrap();
        assert!(m.positions.is_empty());
        assert_eq!(m.input, b);
    }

    #[test]
    fn saturated_rule_masks_everything() {
        let b = batch(50);
        let m = mlm_mask(&b, 30, 1.0, MaskRule::ALWAYS_MASK, &mut rng_from_seed(1)).unwrap();
        assert_eq!(m.positions.len(), 50);
        assert!(m.input.tokens.iter().all(|&t| t == special::MASK));
        assert_eq!(m.targets, b.tokens.iter().map(|&t| t as usize).collect::<Vec<_>>());
    }

    #[test]
    fn selection_rate_matches_probability() {
        let b = batch(100_000);
        let m = mlm_mask(&b, 30, 0.15, MaskRule::default(), &mut rng_from_seed(7)).unwrap();
        let rate = m.positions.len() as f64 / 100_000.0;
        assert!((rate - 0.15).abs() < 0.01, "rate {rate}");
        let masked = m.positions.iter().filter(|&&p| m.input.tokens[p] == special::MASK).count() as f64;
        assert!((masked / m.positions.len() as f64 - 0.8).abs() < 0.02);
    }

    #[test]
    fn padding_is_never_selected() {
        let b = TokenBatch::from_rows(&[vec![5, 6], vec![7]]);
        let m = mlm_mask(&b, 10, 1.0, MaskRule::ALWAYS_MASK, &mut rng_from_seed(0)).unwrap();
        assert_eq!(m.positions, vec![0, 1, 2]);
        assert_eq!(m.input.tokens[3], special::PAD);
    }

    #[test]
    fn vocabulary_without_mask_is_rejected() {
        let b = TokenBatch::new(vec![0, 0], 1, 2).unwrap();
        assert!(matches!(
            mlm_mask(&b, 1, 0.5, MaskRule::default(), &mut rng_from_seed(0)),
            Err(Error::NoMaskToken)
        ));
    }
}
