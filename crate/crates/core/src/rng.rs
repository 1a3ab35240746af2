//! Counter-based random streams.
//!
//! Every path owns a ChaCha stream selected by `(master_seed, stream_id)`, so
//! the draws of path `i` do not depend on how paths are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSpec {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl RngSpec {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self { master_seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Stream for path `path` under `master_seed`.
pub fn path_rng(master_seed: u64, path: usize) -> ChaCha8Rng {
    RngSpec::new(master_seed, path as u64).rng()
}

/// Derives an independent master seed for an auxiliary run (oracles, reseeding).
pub fn derive_seed(master_seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = master_seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
