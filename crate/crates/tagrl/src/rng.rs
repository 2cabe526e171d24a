//! Seed derivation for deterministic, independent random streams.
//!
//! Every random decision in the crate draws from a `ChaCha8Rng` whose seed
//! is derived from a master seed plus a purpose tag and indices. Streams are
//! therefore independent of each other and of execution order, which is what
//! makes checkpoint resume and byte-identical reruns possible: the "rng
//! state" of a run is just the master seed and the current epoch.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the tag, then splitmix64 finalization over the mixed words.
fn mix(mut h: u64) -> u64 {
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58476d1ce4e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a child seed from `(base, tag, indices)`.
pub fn derive_seed(base: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = mix(base ^ fnv1a(tag));
    for (pos, ix) in indices.iter().enumerate() {
        h = mix(h ^ ix.wrapping_add(0x9e3779b97f4a7c15).wrapping_mul(pos as u64 + 1));
    }
    h
}

/// ChaCha8 stream for `(base, tag, indices)`.
pub fn stream(base: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, indices))
}
