//! Deterministic random streams.
//!
//! Every consumer draws from its own ChaCha8 stream. The 256-bit ChaCha key
//! is `SHA-256(seed as 8 little-endian bytes || label as UTF-8)`, so streams
//! for different labels are independent and a given `(seed, label)` pair
//! always produces the same sequence. Both ChaCha8 and SHA-256 are fixed
//! algorithms; the mapping is part of the on-disk reproducibility contract and
//! must not change between versions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, label: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(key)
}
