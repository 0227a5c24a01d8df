//! Labelled random streams derived from one master seed.
//!
//! Each consumer (initialization, shuffling, guidance vectors, pair draws,
//! noise) owns its own stream, so enabling one perturbation strategy never
//! shifts the randomness seen by another consumer.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const GUIDANCE: &str = "guidance";
pub const PAIRS: &str = "pairs";
pub const NOISE: &str = "noise";
pub const DATA: &str = "data";

/// Deterministic stream for `(seed, label)`.
pub fn stream(seed: u64, label: &str) -> StreamRng {
    let mut h = FnvHasher::default();
    h.write_u64(seed);
    h.write(label.as_bytes());
    ChaCha8Rng::seed_from_u64(h.finish())
}
