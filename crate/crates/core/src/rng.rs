//! Seeding contract for every stochastic operation.
//!
//! A run is driven by one 64-bit seed. Independent sub-streams (per image,
//! per mixture cell, per epoch) are derived by mixing the seed with a path of
//! integer tags through SplitMix64, then seeding a ChaCha8 generator. ChaCha8
//! output is specified bit-for-bit, so replays match across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a child seed from `seed` and a path of tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Generator for the sub-stream identified by `tags`.
pub fn rng_for(seed: u64, tags: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Stream tags used across the crate, kept distinct so sub-streams never collide.
pub(crate) mod tags {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const TARGET: u64 = 4;
    pub const GMM: u64 = 5;
    pub const PAIR: u64 = 6;
    pub const SPLIT: u64 = 7;
}
