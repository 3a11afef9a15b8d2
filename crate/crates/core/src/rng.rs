//! Counter-based random streams.
//!
//! Every path draws from its own ChaCha stream keyed by `(root seed, stream id)`,
//! so the numbers a path sees never depend on how paths are scheduled across
//! worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub root_seed: u64,
    /// Stream id of path 0; path `p` uses `first_stream + p`.
    pub first_stream: u64,
}

impl SeedRecord {
    pub fn new(root_seed: u64) -> Self {
        Self {
            root_seed,
            first_stream: 0,
        }
    }

    pub fn stream(&self, path: usize) -> ChaCha8Rng {
        stream_rng(self.root_seed, self.first_stream + path as u64)
    }
}

pub fn stream_rng(root_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(stream);
    rng
}

/// Fills `out` with independent standard normals scaled by `scale`.
pub fn fill_normals(rng: &mut ChaCha8Rng, scale: f64, out: &mut [f64]) {
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = scale * z;
    }
}
