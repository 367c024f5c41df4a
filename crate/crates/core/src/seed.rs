//! Stable seed derivation.
//!
//! Every random stream in a run is keyed by a path of integers hashed onto the
//! root seed, so the stream a client sees in a given round does not depend on
//! how many other streams were consumed before it or on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags used with [`derive`].
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SELECT: u64 = 2;
    pub const CLIENT: u64 = 3;
    pub const LABELED: u64 = 4;
    pub const UNLABELED: u64 = 5;
    pub const DATA: u64 = 6;
    pub const TEST: u64 = 7;
    pub const PARTITION: u64 = 8;
    pub const REPEAT: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `root` and a path of integers.
pub fn derive(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(root: u64, path: &[u64]) -> ChaCha8Rng {
    rng(derive(root, path))
}
