//! Deterministic seeding. Every random stream in the crate is a ChaCha8
//! generator keyed by a seed derived from `(base seed, purpose, indices)`, so
//! results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable purpose tags for derived streams.
pub mod stream {
    pub const PHANTOM: u64 = 1;
    pub const TRAIN_PHASE: u64 = 2;
    pub const TRAIN_NOISE: u64 = 3;
    pub const NOISE_ASSIGNMENT: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const TEST_PHASE: u64 = 6;
    pub const TEST_NOISE: u64 = 7;
    pub const MOTION: u64 = 8;
    pub const RESIDUAL: u64 = 9;
    pub const WEIGHTS: u64 = 10;
    pub const SHUFFLE: u64 = 11;
    pub const COIL: u64 = 12;
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p.wrapping_add(0x5851_F42D))))
}

pub fn rng_for(base: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(base, path))
}
