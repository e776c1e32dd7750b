//! Seeded randomness. Every stochastic step draws from an explicitly passed
//! SplitMix64 stream derived from one 64-bit run seed.

use rand::SeedableRng;
pub use rand_xoshiro::SplitMix64;

pub fn seeded(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Independent child seed for a numbered sub-task (fold, loop, stream).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    seed ^ index
}
