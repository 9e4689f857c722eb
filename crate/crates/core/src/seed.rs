//! Independent random streams derived from one master seed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named streams; each consumer draws from its own so adding draws in one
/// place never shifts another.
pub mod stream {
    pub const BODY: u64 = 1;
    pub const MOTION: u64 = 2;
    pub const SCAN: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const CLOTHING: u64 = 8;
    pub const INFER: u64 = 9;
}

/// Seed number `index` of stream `stream` under `master`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}

/// Generator for stream `stream`, index `index`.
pub fn derive_rng(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}
