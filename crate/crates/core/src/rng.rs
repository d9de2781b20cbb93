//! Deterministic random streams.
//!
//! Every replication or bootstrap draw owns a ChaCha8 stream selected by
//! `(seed, stream index)`, so results do not depend on scheduling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for an indexed sub-task of `seed` within a named domain.
pub fn derive_seed(seed: u64, domain: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ mix64(domain)) ^ index)
}

pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Source of independent, indexable generators.
pub trait RngFactory: Sync {
    type Rng: RngCore;
    fn stream(&self, index: u64) -> Self::Rng;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChaChaStreams {
    pub seed: u64,
}

impl RngFactory for ChaChaStreams {
    type Rng = ChaCha8Rng;
    fn stream(&self, index: u64) -> ChaCha8Rng {
        substream(self.seed, index)
    }
}
