//! Stateless derivation of independent rng streams.
//!
//! Every source of randomness in training and evaluation is a ChaCha stream
//! keyed by (master seed, purpose, a, b). Episodes can then run on any worker
//! in any order and still reproduce bit-identically, and resuming from a
//! checkpoint needs only the master seed and the epoch counter.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep streams for different uses disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    EnvDraw = 1,
    Rollout = 2,
    RewardEval = 3,
    PredTargets = 4,
    ParamInit = 5,
    EvalEpisode = 6,
    QueryResample = 7,
    Benchmark = 8,
}

/// An independent rng stream for (seed, purpose, a, b).
pub fn stream(master_seed: u64, purpose: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
