//! Hierarchical seed derivation.
//!
//! Every random stream in the crate is keyed by a global seed plus a label
//! path, e.g. `("noise", device)` or `("segment", index)`. Derivation hashes
//! the path with SHA-256, so distinct paths give independent-looking streams
//! and identical paths always give the same stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// One element of a seed label path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label<'a> {
    Str(&'a str),
    Int(u64),
}

impl<'a> From<&'a str> for Label<'a> {
    fn from(s: &'a str) -> Self {
        Label::Str(s)
    }
}

impl From<u64> for Label<'_> {
    fn from(v: u64) -> Self {
        Label::Int(v)
    }
}

impl From<usize> for Label<'_> {
    fn from(v: usize) -> Self {
        Label::Int(v as u64)
    }
}

impl From<u32> for Label<'_> {
    fn from(v: u32) -> Self {
        Label::Int(u64::from(v))
    }
}

/// Derives a child seed from `global_seed` and a label path.
pub fn seed_stream(global_seed: u64, labels: &[Label<'_>]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"mbtc-seed-v1");
    hasher.update(global_seed.to_le_bytes());
    for label in labels {
        // tag + length prefix keeps ("ab","c") and ("a","bc") apart
        match label {
            Label::Str(s) => {
                hasher.update([0u8]);
                hasher.update((s.len() as u64).to_le_bytes());
                hasher.update(s.as_bytes());
            }
            Label::Int(v) => {
                hasher.update([1u8]);
                hasher.update(v.to_le_bytes());
            }
        }
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Seeded generator for a label path.
pub fn rng_for(global_seed: u64, labels: &[Label<'_>]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed_stream(global_seed, labels))
}
