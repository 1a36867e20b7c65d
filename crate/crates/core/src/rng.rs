//! Named deterministic RNG streams.
//!
//! Every random draw in the workbench comes from a stream identified by
//! `(seed, domain, name)`. Stream state depends only on that triple, never on
//! allocation or scheduling order, so per-tensor init, per-image noise, and
//! per-epoch shuffles are reproducible bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A seeded stream for `(seed, domain, name)`.
pub fn stream(seed: u64, domain: &str, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"unit-atlas/");
    hasher.update(domain.as_bytes());
    hasher.update([0u8]);
    hasher.update(name.as_bytes());
    hasher.update([0u8]);
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Stream addressed by a counter instead of a name (per image, per epoch...).
pub fn stream_indexed(seed: u64, domain: &str, index: u64) -> ChaCha8Rng {
    stream(seed, domain, &index.to_string())
}
