//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the global
//! seed plus a list of tags (client id, round, purpose). Streams never depend
//! on scheduling order, so concurrent client phases stay reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags. Values are arbitrary but must stay fixed for reproducibility.
pub mod purpose {
    pub const WORLD: u64 = 0x01;
    pub const ENCODER: u64 = 0x02;
    pub const SPLIT: u64 = 0x03;
    pub const MIX: u64 = 0x04;
    pub const SAMPLING: u64 = 0x05;
    pub const DP: u64 = 0x06;
    pub const HEAD: u64 = 0x07;
    pub const ADAPTER_INIT: u64 = 0x08;
    pub const SERVER: u64 = 0x09;
    pub const LOCAL: u64 = 0x0a;
    pub const FEW_SHOT: u64 = 0x0b;
    pub const ADAPT: u64 = 0x0c;
    pub const ATTACK: u64 = 0x0d;
    pub const SHARD: u64 = 0x0e;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a sequence of tags into a single 64-bit stream seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, tags))
}
