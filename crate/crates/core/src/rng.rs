use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Portable seeded generator used for every random draw in the crate.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
