//! Seed derivation.
//!
//! Every random decision in the artifact flows from a run seed through
//! explicit derivations, so datasets, mask plans, and training runs are
//! reproducible bit-for-bit regardless of thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates (seed, index) pairs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Child seed for stream `index` of `seed`.
pub fn derive(seed: u64, index: u64) -> u64 {
    mix(seed ^ mix(index))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Per-episode generator: hash(seed, episode index), so generation order
/// and parallelism cannot change an episode's content.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    rng_from(derive(seed, index))
}
