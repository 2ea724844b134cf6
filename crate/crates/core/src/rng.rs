//! Seed-indexed randomness.
//!
//! Every random draw in the pipeline comes from a generator keyed by a base
//! seed plus a tuple of stream coordinates (epoch, utterance index, draw
//! index, ...). No generator is shared between call sites, so results never
//! depend on call order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep independent consumers of the same seed apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Synthetic = 1,
    KShot = 2,
    Mask = 3,
    Dropout = 4,
    Init = 5,
    Shuffle = 6,
    GradCheck = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a seed and a list of coordinates into one 64-bit key.
pub fn mix(seed: u64, stream: Stream, coords: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(stream as u64));
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

/// A fresh generator for the given coordinates.
pub fn rng_for(seed: u64, stream: Stream, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, stream, coords))
}
