//! Counter-based seed splitting so every component draws from its own stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of sub-stream `stream` from `seed`.
pub fn split_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split_seed(seed, stream))
}

/// Well-known stream ids.
pub mod streams {
    pub const SCENE: u64 = 1;
    pub const RENDER_A: u64 = 2;
    pub const RENDER_B: u64 = 3;
    pub const GEOMETRY: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const INIT: u64 = 6;
    pub const SHUFFLE: u64 = 7;
    pub const SUBSAMPLE: u64 = 8;
    pub const QUERIES: u64 = 9;
    pub const RANSAC: u64 = 10;
}
