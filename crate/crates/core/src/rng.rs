//! Seed derivation so every stochastic path is a pure function of
//! (run seed, purpose, indices).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seed used whenever a command is given none.
pub const DEFAULT_SEED: u64 = 20_240_607;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine a seed with a sequence of tags into a new seed.
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |h, p| splitmix(h ^ splitmix(*p)))
}

pub fn rng_for(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, parts))
}
