//! Seed derivation. Every random stream in the simulator is keyed by an
//! explicit tuple so results do not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of tags into a new 64-bit seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags, so that distinct uses of one base seed never collide.
pub(crate) mod tag {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const CLIENT: u64 = 4;
    pub const DROP_MASK: u64 = 5;
    pub const SPLIT: u64 = 6;
}
