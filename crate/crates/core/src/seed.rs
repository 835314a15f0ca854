//! Per-purpose seed derivation.
//!
//! A run has one user-facing seed. Each consumer (weights, placeholder
//! embeddings, experiment draws) gets `splitmix64(seed ^ fnv1a64(label))`,
//! so changing the seed changes every stream and streams never collide.

pub const WEIGHTS: &str = "weights";
pub const PLACEHOLDERS: &str = "placeholders";
pub const EXPERIMENT: &str = "experiment";

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ fnv1a64(label.as_bytes()))
}

/// Seed for the `index`-th item of a labelled stream (e.g. one draw per experiment seed).
pub fn derive_indexed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive(seed, label) ^ splitmix64(index))
}
