//! Deterministic RNG stream derivation. Every random consumer gets its own
//! ChaCha stream derived from the run seed and a label path, so parallel
//! execution order never changes the draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Derives independent, reproducible RNG streams from a root seed.
#[derive(Debug, Clone, Copy)]
pub struct SeedTree {
    seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child tree for a labeled sub-task (stage index, member index, ...).
    pub fn child(&self, label: &str, index: u64) -> SeedTree {
        let mut h = self.seed;
        for b in label.as_bytes() {
            h = splitmix64(h ^ u64::from(*b));
        }
        SeedTree { seed: splitmix64(h ^ index) }
    }

    /// Materialize the stream at this node of the tree.
    pub fn rng(&self) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(self.seed)
    }
}
