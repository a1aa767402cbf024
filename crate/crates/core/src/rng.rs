//! Seeded, splittable random streams.
//!
//! Every random draw in a run comes from a ChaCha8 generator whose seed is a
//! SplitMix64 hash of the run seed and a key path such as
//! `(purpose, step, task, rollout)`. Streams never share state, so results do
//! not depend on evaluation order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha8Rng;

/// Algorithm tag stored in checkpoints.
pub const RNG_ALGORITHM: &str = "chacha8-splitmix64";
pub const RNG_VERSION: u32 = 1;

/// Stream purposes.
pub mod purpose {
    pub const TASKS: u64 = 1;
    pub const ROLLOUT: u64 = 2;
    pub const EVAL_SET: u64 = 3;
    pub const INIT: u64 = 4;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Root of a family of substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngTree {
    seed: u64,
}

impl RngTree {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator for the given key path.
    pub fn stream(&self, path: &[u64]) -> StreamRng {
        let mut h = splitmix64(self.seed);
        for &k in path {
            h = splitmix64(h ^ splitmix64(k));
        }
        ChaCha8Rng::seed_from_u64(h)
    }
}
