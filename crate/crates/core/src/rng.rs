//! Deterministic randomness helpers.
//!
//! Sequential draws use ChaCha; per-element decisions that must not depend
//! on evaluation order (dropout masks) use a counter-based hash.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a key with another component into a new key.
#[inline]
pub fn mix(key: u64, part: u64) -> u64 {
    splitmix(key ^ splitmix(part))
}

/// Uniform value in [0, 1) keyed by `(key, counter)`.
#[inline]
pub fn unit(key: u64, counter: u64) -> f64 {
    (mix(key, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
