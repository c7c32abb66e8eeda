//! Deterministic stream derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is a
//! hash of a master seed and a small tuple of integer keys (trajectory id,
//! step index, purpose tag). Two consumers asking for the same key tuple get
//! the same numbers, which is what paired simulations and weight sweeps rely
//! on for common random numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Stream = ChaCha8Rng;

/// Purpose tags keep streams for different roles disjoint.
pub mod tag {
    pub const INIT: u64 = 0x696e_6974;
    pub const SOLVER: u64 = 0x736f_6c76;
    pub const FIELD: u64 = 0x6669_656c;
    pub const FROZEN: u64 = 0x6672_6f7a;
    pub const CELL: u64 = 0x6365_6c6c;
    pub const MC: u64 = 0x6d63_6d63;
    pub const SUITE: u64 = 0x7375_6974;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash a master seed and keys into a single 64-bit seed.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(seed: u64, keys: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, keys))
}

pub fn standard_normal_vec(rng: &mut Stream, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}
