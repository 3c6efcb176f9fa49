use rand::Rng as _;

use crate::numerics::{Rng, Scalar};

/// Inverted dropout mask; identity when no generator is supplied or `p == 0`.
#[derive(Clone, Debug)]
pub struct Dropout<T> {
    mask: Option<Vec<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn identity() -> Self {
        Self { mask: None }
    }

    pub fn sample(len: usize, p: f64, rng: Option<&mut Rng>) -> Self {
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = T::c(1.0 / (1.0 - p));
                // Drop when a uniform u32 falls below p·2³².
                let threshold = (p * 4_294_967_296.0) as u64;
                let mut bits = vec![0u32; len];
                rng.fill(&mut bits[..]);
                let mask = bits
                    .into_iter()
                    .map(|b| if (b as u64) < threshold { T::zero() } else { keep })
                    .collect();
                Self { mask: Some(mask) }
            }
            _ => Self::identity(),
        }
    }

    pub fn apply(&self, x: &mut [T]) {
        if let Some(mask) = &self.mask {
            for (v, &m) in x.iter_mut().zip(mask) {
                *v *= m;
            }
        }
    }
}
