//! Seed-derived RNG streams.
//!
//! Every stochastic stage draws from its own stream derived from
//! `(root seed, tag, index)`, so streams never share mutable state and any
//! stage can be re-derived in isolation (checkpoint resume, parallel
//! workers).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates structured seed/tag combinations.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// RNG stream for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let s = mix(seed ^ mix(tag_hash(tag)) ^ mix(index.wrapping_mul(0xa076_1d64_78bd_642f)));
    ChaCha8Rng::seed_from_u64(s)
}
