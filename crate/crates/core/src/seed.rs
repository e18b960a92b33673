//! Seed streams. Every random decision in a run draws from one of a few
//! independent streams derived from the master seed, so changing e.g. the
//! split fraction never perturbs parameter initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng64 = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Order = 2,
    Split = 3,
    Dropout = 4,
    History = 5,
    /// Label corruption of a generated dataset.
    Data = 6,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn stream_seed(master: u64, stream: Stream) -> u64 {
    master.wrapping_add((stream as u64).wrapping_mul(GOLDEN))
}

pub fn rng(seed: u64) -> Rng64 {
    Rng64::seed_from_u64(seed)
}

pub fn stream_rng(master: u64, stream: Stream) -> Rng64 {
    rng(stream_seed(master, stream))
}
