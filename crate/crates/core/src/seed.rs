//! Seeded randomness.
//!
//! Every random stream in the crate is a ChaCha8 generator keyed by four
//! 64-bit words (typically run seed, epoch or step, sample index, pipeline id),
//! so a sample's randomness never depends on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers used as the last key word.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SYNTH: u64 = 2;
    pub const SHIFT: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const BATCH: u64 = 5;
    pub const STRONG: u64 = 6;
    pub const WEAK: u64 = 7;
    pub const STRONG_UNLABELED: u64 = 8;
    pub const WEAK_LABELED: u64 = 9;
}

pub fn rng_for(key: [u64; 4]) -> Rng {
    let mut seed = [0u8; 32];
    for (chunk, word) in seed.chunks_exact_mut(8).zip(key) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
