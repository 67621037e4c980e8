//! Seeded, counter-based random streams.
//!
//! Every stochastic routine takes an explicit `&mut impl Rng`. Jobs derive
//! independent streams from one top-level seed with [`stream`], so results
//! are reproducible regardless of how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream ids for the subsystems of a job.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const GEN: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const TIMESTEP: u64 = 4;
    pub const MOMENTA: u64 = 5;
    pub const SIMULATE: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const AUGMENT: u64 = 8;
}

/// Independent stream `(purpose, index)` derived from `seed`.
pub fn stream(seed: u64, purpose: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}
