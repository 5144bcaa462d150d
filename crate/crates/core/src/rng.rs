//! Seeded random streams.
//!
//! Every source of randomness in the crate derives from one global seed
//! through named substreams, so individual analyses are reproducible in
//! isolation: `stream(seed, &[NOISE, amp, trial, sample])` always yields the
//! same generator no matter what ran before it.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Substream tags. Keeping them in one place avoids accidental collisions
/// between unrelated consumers of the same seed.
pub mod tag {
    pub const INIT: u64 = 0x01;
    pub const SHUFFLE: u64 = 0x02;
    pub const SUBSET: u64 = 0x03;
    pub const SYNTH: u64 = 0x04;
    pub const SAMPLE_NOISE: u64 = 0x05;
    pub const WEIGHT_NOISE: u64 = 0x06;
    pub const REFINE: u64 = 0x07;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a seed with a sequence of tags into a single 64-bit stream key.
pub fn stream_key(seed: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    h
}

/// A deterministic generator for the given seed and substream tags.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, tags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible() {
        let mut a = stream(42, &[tag::INIT, 7]);
        let mut b = stream(42, &[tag::INIT, 7]);
        for _ in 0..16 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn tags_separate_streams() {
        let mut a = stream(42, &[tag::INIT]);
        let mut b = stream(42, &[tag::SHUFFLE]);
        let va: Vec<u64> = (0..4).map(|_| a.random()).collect();
        let vb: Vec<u64> = (0..4).map(|_| b.random()).collect();
        assert_ne!(va, vb);
    }

    #[test]
    fn tag_order_matters() {
        assert_ne!(stream_key(1, &[2, 3]), stream_key(1, &[3, 2]));
    }
}
