//! Seed derivation.
//!
//! Every random stream in the crate is addressed by an explicit `(seed, tag)`
//! pair. A parent seed is split into child seeds with a SplitMix64 finalizer,
//! so any component can be reproduced in isolation from the global seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over bytes; stable across platforms and releases.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Child seed for a named sub-stream.
pub fn derive(seed: u64, tag: &str) -> u64 {
    mix64(seed ^ mix64(hash_str(tag)))
}

/// Child seed for an indexed sub-stream.
pub fn derive_index(seed: u64, index: u64) -> u64 {
    mix64(seed.wrapping_add(mix64(index ^ 0xA076_1D64_78BD_642F)))
}

/// Counter-based generator for `(seed, tag)`.
pub fn stream(seed: u64, tag: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag))
}

pub fn stream_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derive_is_stable_and_tag_sensitive() {
        assert_eq!(derive(7, "fps"), derive(7, "fps"));
        assert_ne!(derive(7, "fps"), derive(7, "pose"));
        assert_ne!(derive(7, "fps"), derive(8, "fps"));
        assert_ne!(derive_index(1, 0), derive_index(1, 1));
    }

    #[test]
    fn streams_replay() {
        let a: Vec<u64> = stream(3, "x").random_iter().take(4).collect();
        let b: Vec<u64> = stream(3, "x").random_iter().take(4).collect();
        assert_eq!(a, b);
    }
}
