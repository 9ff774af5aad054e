//! Deterministic seed derivation. Every random draw in the pipeline comes
//! from a ChaCha8 stream keyed by the run seed mixed with a purpose tag.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream for `(seed, tag, index)`, e.g. the mask of one sample in one epoch.
pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    seeded(mix(mix(seed, tag), index))
}

pub(crate) mod tags {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const MASK: u64 = 3;
    pub const FPS: u64 = 4;
    pub const TEACHER_MASK: u64 = 5;
    pub const DATA: u64 = 6;
    pub const AUGMENT: u64 = 7;
    pub const SPLIT: u64 = 8;
}
