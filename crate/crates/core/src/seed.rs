//! Independent deterministic RNG streams derived from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Distinct `(tag, a, b)` triples give statistically independent streams.
pub fn stream_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [tag, a, b] {
        x = (x ^ v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x ^= x >> 31;
    }
    ChaCha8Rng::seed_from_u64(x)
}
