//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded from a value
//! derived here, so that parallel work (episodes, optimizer starts) draws
//! from independent streams identified by `(master, stream, index)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags used with [`derive_seed`].
pub mod stream {
    pub const TRACK: u64 = 1;
    pub const EPISODE: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const INIT: u64 = 5;
    pub const MULTISTART: u64 = 6;
    pub const SEARCH: u64 = 7;
    pub const OBJECTIVE: u64 = 8;
    pub const SWEEP: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with a stream tag and an index into a child seed.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let a = splitmix64(master ^ 0x5851_f42d_4c95_7f2d);
    let b = splitmix64(a ^ stream.wrapping_mul(0x2545_f491_4f6c_dd1d));
    splitmix64(b ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub fn rng_for(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}
