//! Deterministic RNG derivation and hashing helpers.

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Derives an independent RNG stream from a root seed, a purpose label and
/// an index. Streams for different `(label, index)` pairs are statistically
/// independent, so reordering or parallelizing unrelated stages cannot
/// perturb each other's draws.
pub fn derive_rng(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    <ChaCha8Rng as rand::SeedableRng>::from_seed(key)
}

/// Derives a fresh u64 sub-seed (for nesting stages that take a seed).
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"subseed:");
    h.update(label.as_bytes());
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
