//! Stable seed derivation and content hashing.
//!
//! Every stochastic path in the crate draws from a [`rand_chacha::ChaCha8Rng`]
//! seeded through [`mix`], so results are identical across runs, platforms,
//! and worker-thread counts.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from a master seed and an arbitrary label path.
///
/// The derivation is SHA-256 over the little-endian master seed and the
/// labels, so it does not depend on any process state.
pub fn mix(master: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for label in labels {
        hasher.update([0u8]);
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Derive a child seed from a master seed, a label, and an index.
pub fn mix_indexed(master: u64, label: &str, index: u64) -> u64 {
    mix(master, &[label, &index.to_string()])
}

/// Deterministic generator for a derived seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Hex-encoded SHA-256 of a byte slice, used for shard and report hashes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
