//! Deterministic seed derivation and stable hashing.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded through
//! [`seed_stream`], so results depend only on the user seed and a fixed set of
//! stream labels, never on platform hashers or thread timing.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; the standard 64-bit mixer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Fold a seed with a list of stream labels into a single 64-bit seed.
pub fn mix_seed(seed: u64, streams: &[u64]) -> u64 {
    let mut acc = splitmix64(seed);
    for &s in streams {
        acc = splitmix64(acc ^ s.wrapping_mul(0x9e3779b97f4a7c15));
    }
    acc
}

/// ChaCha8 RNG for a (seed, stream labels) pair.
pub fn seed_stream(seed: u64, streams: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, streams))
}

/// FNV-1a over bytes; used for content-addressed caching keys.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
