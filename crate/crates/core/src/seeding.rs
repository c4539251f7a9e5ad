//! Stable hashing and seed derivation.
//!
//! Everything seeded in this crate goes through these functions so that
//! outputs do not depend on the standard library's hasher or on the order
//! in which random streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, stream)`; each purpose uses its own tag.
pub fn stream_seed(seed: u64, tag: &str, stream: u64) -> u64 {
    mix(mix(seed ^ fnv1a(tag.as_bytes())).wrapping_add(stream))
}

pub fn rng(seed: u64, tag: &str, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, tag, stream))
}
