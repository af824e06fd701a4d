//! Seeded randomness.
//!
//! Every stochastic step draws from [`SplitMix64`]: a 64-bit state advanced by
//! the golden-ratio increment `0x9E3779B97F4A7C15` and finalised with the
//! `(x ^ x>>30) * 0xBF58476D1CE4E5B9`, `(x ^ x>>27) * 0x94D049BB133111EB`,
//! `x ^ x>>31` mix. Uniform `f64` draws take the top 53 bits of a `u64`
//! scaled by `2^-53`, so k-means++ seeding is reproducible from the seed
//! alone in any language.
//!
//! Independent streams are derived with [`substream`], which folds a list of
//! tags into the seed through the same finaliser. Adding a new tag therefore
//! never perturbs an existing stream.

use rand::{Rng, SeedableRng};
pub use rand_xoshiro::SplitMix64;

pub type CosmosRng = SplitMix64;

/// Stream tags, kept distinct so that e.g. mixture sampling and clustering never share draws.
pub mod tag {
    pub const MIXTURE: u64 = 1;
    pub const CLUSTER: u64 = 2;
    pub const GENERATE: u64 = 3;
    pub const ORACLE: u64 = 4;
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and a path of tags.
pub fn substream(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(seed), |acc, &t| {
        mix(acc ^ mix(t.wrapping_add(0x9E37_79B9_7F4A_7C15)))
    })
}

pub fn rng_from_seed(seed: u64) -> CosmosRng {
    SplitMix64::seed_from_u64(seed)
}

pub fn stream(seed: u64, tags: &[u64]) -> CosmosRng {
    rng_from_seed(substream(seed, tags))
}

/// Uniform draw in `[0, 1)` from the top 53 bits.
pub fn uniform(rng: &mut CosmosRng) -> f64 {
    (rng.random::<u64>() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
