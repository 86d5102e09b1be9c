//! Seed derivation. Every random stream is a pure function of a tuple of integers
//! (global seed, sample id, epoch, purpose tag, ...), so results never depend on
//! iteration order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix an ordered tuple of integers into a single 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5e1f_1e5e_ed00_0001, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_from(parts: &[u64]) -> SeededRng {
    SeededRng::seed_from_u64(derive_seed(parts))
}

/// Purpose tags keep streams for different uses of the same sample independent.
pub mod tag {
    pub const SCENE: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const CROP: u64 = 4;
    pub const PLAN: u64 = 5;
    pub const INIT: u64 = 6;
    pub const ISP: u64 = 7;
    pub const SECOND_NOISE: u64 = 8;
    pub const BLUR_NOISE: u64 = 9;
}
