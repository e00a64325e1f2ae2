//! Seeded randomness shared by every stage.
//!
//! All streams are SplitMix64 generators. Sub-streams are derived by mixing a
//! base seed with a stream tag so that results never depend on iteration order.

use rand::SeedableRng;
pub use rand_xoshiro::SplitMix64;

pub fn stream(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// 64-bit FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
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

/// Seed for a named sub-stream of `seed`.
pub fn derive(seed: u64, tag: &str, index: u64) -> u64 {
    mix(mix(seed ^ fnv1a(tag.as_bytes())) ^ index)
}
