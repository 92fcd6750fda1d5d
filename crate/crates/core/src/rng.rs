//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by a
//! `(seed, stream)` pair, so training, evaluation and noise estimation never
//! share a stream even when they share a seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream used by learner runs and plain path sampling.
pub const TRAIN_STREAM: u64 = 0;
/// Stream used when estimating noise statistics along a fresh trajectory.
pub const NOISE_STREAM: u64 = 2;
/// Stream used by generators of random test instances.
pub const INSTANCE_STREAM: u64 = 3;
/// Policy evaluation paths use `EVAL_STREAM_BASE + path index`.
pub const EVAL_STREAM_BASE: u64 = 1 << 32;

pub fn stream_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
