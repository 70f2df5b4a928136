//! Seed plumbing. All randomness in the crate flows through ChaCha8
//! streams derived here, so that every artifact is a pure function of
//! the experiment seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Independent per-item stream: same `(seed, index)` always yields the
/// same stream, and streams for different indices never overlap. This is
/// what makes degradations independent of batch size and worker count.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Derive a sub-seed for a named purpose ("init_p", "shuffle", ...).
/// Stable across runs and platforms.
pub fn derive(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Derive a sub-seed for a named purpose plus a counter (e.g. per epoch).
pub fn derive_indexed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
