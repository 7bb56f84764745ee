//! Deterministic RNG substreams.
//!
//! Every randomized operation derives an independent stream from
//! `(seed, tag, index)` through a SplitMix64 chain, so per-box, per-draw or
//! per-replicate work can run in any order (or in parallel) and still
//! reproduce bit-for-bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep substreams of different operations disjoint even when
/// they share a user seed.
pub mod tags {
    pub const SIMULATE: u64 = 0x5153;
    pub const POSTERIOR_DRAW: u64 = 0x4452;
    pub const FOLDS: u64 = 0x464c;
    pub const SIGN_FLIP: u64 = 0x5346;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Mix `(seed, tag, index)` into a single well-distributed 64-bit value.
pub fn mix(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ tag) ^ index)
}

/// A fresh RNG for substream `(tag, index)` of `seed`.
pub fn substream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tag, index))
}
