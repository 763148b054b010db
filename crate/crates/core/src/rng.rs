//! Seeded random-number substreams.
//!
//! Every consumer of randomness derives its generator from an explicit seed
//! and a named stream, so simulation, initialization, batch sampling and
//! evaluation can be re-run independently of each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Model parameters drawn by `generate_random_lds`.
    Sim = 1,
    /// Latent and observation noise drawn by `simulate`.
    Noise = 2,
    /// Optimizer / EM initialization.
    Init = 3,
    /// Minibatch sampling of `(t, s)` pairs.
    Batch = 4,
    /// Pair sampling for monitoring and evaluation.
    Eval = 5,
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Substream further split by an index (restart number, session number, ...).
pub fn indexed_substream(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream as u64);
    rng
}
