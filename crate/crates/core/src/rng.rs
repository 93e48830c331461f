//! Seeded random streams.
//!
//! All randomness in the engine flows from a single `u64` seed through named
//! sub-streams, so independent subsystems (scene generation, parameter init,
//! per-step sampling) can be re-seeded without disturbing each other. Streams
//! are derived by hashing `(seed, name)`, which keeps them stable across runs
//! and independent of call order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic RNG stream for `(seed, name)`.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Stream for `(seed, name, index)`; used for per-step and per-pixel streams.
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = stream(seed, name);
    rng.set_stream(index);
    rng
}

/// Deterministic child seed for `(seed, name, index)`.
pub fn derive(seed: u64, name: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
