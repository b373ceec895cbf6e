//! Deterministic seeding helpers.
//!
//! Every random choice in the pipeline flows from a user-visible `--seed`
//! through [`derive_seed`], so that sub-tasks (per-utterance synthesis,
//! per-epoch shuffles, per-parameter init) get independent streams whose
//! values do not depend on evaluation order or worker count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the tag bytes, mixed with the base seed and index via
/// splitmix64. Stable across platforms and releases.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(base ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e3779b97f4a7c15))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// The RNG used throughout the crate.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derive_seed_is_stable() {
        assert_eq!(derive_seed(7, "epoch", 3), derive_seed(7, "epoch", 3));
        assert_ne!(derive_seed(7, "epoch", 3), derive_seed(7, "epoch", 4));
        assert_ne!(derive_seed(7, "epoch", 3), derive_seed(7, "utt", 3));
        assert_ne!(derive_seed(7, "epoch", 3), derive_seed(8, "epoch", 3));
    }

    #[test]
    fn rng_streams_reproduce() {
        let mut a = rng_from_seed(derive_seed(1, "x", 0));
        let mut b = rng_from_seed(derive_seed(1, "x", 0));
        let va: Vec<u32> = (0..8).map(|_| a.gen()).collect();
        let vb: Vec<u32> = (0..8).map(|_| b.gen()).collect();
        assert_eq!(va, vb);
    }
}
