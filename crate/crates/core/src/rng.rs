//! Deterministic seed derivation.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] whose seed is a
//! pure function of a master seed and a key path, so results do not depend
//! on scheduling or on the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels keep independent consumers of one master seed apart.
pub mod tag {
    pub const TUNE: u64 = 1;
    pub const ADJUSTED: u64 = 2;
    pub const SUBSAMPLED: u64 = 3;
    pub const BOOTSTRAP: u64 = 4;
    pub const GIBBS: u64 = 5;
    pub const PREDICT: u64 = 6;
    pub const SCENARIO: u64 = 7;
    pub const ZETA: u64 = 8;
    pub const REPLICATE: u64 = 9;
    pub const POSTERIOR_DRAW: u64 = 10;
    pub const CLUSTERSTATS: u64 = 11;
    pub const PIPELINE: u64 = 12;
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// A master seed from which keyed child streams are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream(u64);

impl SeedStream {
    pub fn new(master: u64) -> Self {
        SeedStream(master)
    }

    pub fn master(&self) -> u64 {
        self.0
    }

    /// Child stream keyed by `path`. Distinct paths give unrelated streams.
    pub fn child(&self, path: &[u64]) -> SeedStream {
        let mut h = splitmix(self.0 ^ 0x5851_f42d_4c95_7f2d);
        for &k in path {
            h = splitmix(h ^ splitmix(k.wrapping_add(0x2545_f491_4f6c_dd1d)));
        }
        SeedStream(h)
    }

    pub fn rng(&self, path: &[u64]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.child(path).0)
    }
}

/// Stable 64-bit key for a list of indices (e.g. a study subset).
pub fn key_of(indices: &[usize]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &i in indices {
        h = splitmix(h ^ i as u64);
    }
    h ^ indices.len() as u64
}
