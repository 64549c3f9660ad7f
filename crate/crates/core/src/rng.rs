//! Seeded random streams.
//!
//! All randomness goes through ChaCha8, which produces the same stream on
//! every platform for a given seed. Independent sub-streams (dummy-circuit
//! replicates, per-task generators) are derived with SplitMix64 so that
//! adding a replicate never shifts the draws of another one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for sub-stream `(a, b)` of `base`.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    mix64(mix64(mix64(base) ^ a) ^ b.rotate_left(17))
}
