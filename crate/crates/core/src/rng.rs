//! Counter-based seeding. Every random draw in the library comes from a
//! generator keyed by `(seed, stream, index)`, so results never depend on
//! call order, worker count or how work is partitioned.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derive a child seed from a parent seed and a list of keys.
pub fn derive(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(mix64(seed), |acc, &k| mix64(acc ^ mix64(k)))
}

/// Stable 64-bit key for a stream name.
pub fn stream(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn rng_for(seed: u64, name: &str, keys: &[u64]) -> Rng {
    let mut all = Vec::with_capacity(keys.len() + 1);
    all.push(stream(name));
    all.extend_from_slice(keys);
    Rng::seed_from_u64(derive(seed, &all))
}

/// Uniform float in [0, 1) from a hashed counter; cheaper than building a
/// generator when only a few draws per key are needed.
pub fn hash_unit(seed: u64, keys: &[u64]) -> f64 {
    (derive(seed, keys) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
