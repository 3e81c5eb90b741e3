//! Seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by a
//! 64-bit seed and a stream id. Sub-seeds are derived with splitmix64 so a
//! single user seed fans out into independent, reproducible streams
//! regardless of how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(label.wrapping_add(0xA076_1D64_78BD_642F)))
}

/// Derive a child seed from a parent seed and a path of labels.
pub fn derive_seed_path(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(seed, |s, &l| derive_seed(s, l))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator keyed by `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fixed labels for the top-level stages so seeds stay stable when stages are reordered.
pub mod label {
    pub const TWIN: u64 = 1;
    pub const METHOD: u64 = 2;
    pub const PRIOR: u64 = 3;
    pub const QAOA: u64 = 4;
    pub const QMCMC: u64 = 5;
    pub const RESAMPLE: u64 = 6;
    pub const PREDICT: u64 = 7;
    pub const MEASURE: u64 = 8;
    pub const QVR: u64 = 9;
    pub const SCALING: u64 = 10;
}
