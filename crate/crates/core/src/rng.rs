//! Seed plumbing. Every stochastic component takes an explicitly seeded
//! ChaCha stream; sub-streams are derived with SplitMix64 so that adding a
//! consumer never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng64 = ChaCha8Rng;

/// SplitMix64 finaliser over `base ^ tag`.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> Rng64 {
    Rng64::seed_from_u64(seed)
}

pub fn substream(base: u64, tag: u64) -> Rng64 {
    seeded(derive_seed(base, tag))
}
