//! Seeded, counter-addressed random streams.
//!
//! Every consumer derives its generator from `(seed, domain, index)`, so the
//! numbers an item sees do not depend on how many items were processed before
//! it or on which worker processed it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha8Rng;

/// Domain separators for the independent random streams.
pub mod domain {
    pub const RESET: u64 = 1;
    pub const BEHAVIOR: u64 = 2;
    pub const PAIRS: u64 = 3;
    pub const TEACHER: u64 = 4;
    pub const SEGMENTS: u64 = 5;
    pub const INIT: u64 = 6;
    pub const TRAIN: u64 = 7;
    pub const RANDOM_REF: u64 = 8;
    pub const EVAL: u64 = 9;
}

pub fn stream(seed: u64, domain: u64, index: u64) -> StreamRng {
    let mixed = seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream(index);
    rng
}

/// Serializable position of a [`StreamRng`], for bit-exact resume.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &StreamRng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> StreamRng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
