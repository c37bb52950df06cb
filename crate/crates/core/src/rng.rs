//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the
//! master seed, a fixed [`Stream`] id and a per-consumer index. ChaCha's
//! 64-bit stream id is the counter split: the upper 32 bits carry the
//! [`Stream`] tag and the lower 32 bits the index, so new consumers never
//! shift the draws of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids. Values are part of the reproducibility contract: never reorder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum Stream {
    ParamInit = 1,
    DataShuffle = 2,
    Noise = 3,
    AttackerInit = 4,
    AttackerShuffle = 5,
    EvalNoise = 6,
    DataGen = 7,
    LemmaTrials = 8,
    FrozenEncoder = 9,
}

pub fn stream(seed: u64, kind: Stream, index: u32) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((kind as u64) << 32) | index as u64);
    rng
}

/// Child seed for an independent job (grid cell, repeat), mixed with SplitMix64.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
