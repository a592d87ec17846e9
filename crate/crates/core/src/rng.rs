//! Keyed random substreams.
//!
//! Every consumer of randomness derives its own generator from the master seed
//! plus a key path, so results never depend on the order in which silos,
//! rounds or matrix cells are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a; stable across platforms and toolchains, unlike `DefaultHasher`.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

pub fn mix(seed: u64, key: &[u64]) -> u64 {
    key.iter().fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn substream(seed: u64, key: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(mix(seed, key))
}

/// Domain tags keeping unrelated streams apart.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const SELECT: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const SILO_DATA: u64 = 6;
    pub const FEDERATION_DATA: u64 = 7;
    pub const LAYOUT: u64 = 8;
}
