//! Seed derivation. Every random stream in the crate is keyed by the
//! experiment seed plus a tuple of integers, never by scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Domain tags keep streams for different purposes apart.
pub mod tag {
    pub const CASE: u64 = 1;
    pub const SKEW: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const AUGMENT: u64 = 6;
}

/// 64-bit seed from SHA-256 over the little-endian encoding of `parts`.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}
