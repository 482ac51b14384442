//! Independent random streams derived from one experiment seed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named purposes that get their own stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Purpose {
    Synthesis = 1,
    Split = 2,
    Partition = 3,
    Init = 4,
    Grouping = 5,
    LocalTraining = 6,
    Online = 7,
    Corpus = 8,
}

/// A ChaCha stream keyed by `(seed, purpose, index)`. Different keys never
/// share a stream, so work can be reordered or parallelised without changing
/// what any consumer draws.
pub fn stream(seed: u64, purpose: Purpose, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 32) | index as u64);
    rng
}

pub fn derive(seed: u64, purpose: Purpose, index: u32) -> u64 {
    stream(seed, purpose, index).next_u64()
}
