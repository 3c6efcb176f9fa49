use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used everywhere randomness is needed.
pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer (Steele, Lea and Flood). Used only to derive
/// independent child seeds, never as a stream generator.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for a named sub-stream. Distinct labels give unrelated streams.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    label
        .bytes()
        .fold(splitmix64(seed), |acc, b| splitmix64(acc ^ b as u64))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
