//! Counter-based seed derivation.
//!
//! Every random stream in a run is keyed by `(master, a, b, tag)` and mixed
//! with the SplitMix64 finalizer:
//!
//! ```text
//! derive(master, a, b, tag) = master XOR mix(mix(mix(a) XOR b) XOR tag)
//! mix(z) = splitmix64 finalizer of (z + 0x9E3779B97F4A7C15)
//! ```
//!
//! Streams are then driven by ChaCha8, so results are bit-reproducible for a
//! fixed master seed regardless of thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stage tags separating independent streams of the same trial.
pub mod tag {
    pub const PROFILES: u64 = 0x5052_4f46;
    pub const GRAPH: u64 = 0x4752_4150;
    pub const TRACES: u64 = 0x5452_4143;
    pub const PERMUTATION: u64 = 0x5045_524d;
    pub const NOISE: u64 = 0x4e4f_4953;
    pub const CHANNEL: u64 = 0x4348_414e;
    pub const GROUP: u64 = 0x4752_5550;
    pub const USER: u64 = 0x5553_4552;
}

pub fn mix(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, a: u64, b: u64, tag: u64) -> u64 {
    master ^ mix(mix(mix(a) ^ b) ^ tag)
}

pub fn rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}
