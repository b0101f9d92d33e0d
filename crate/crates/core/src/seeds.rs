//! Named random sub-streams derived from one experiment seed.
//!
//! Each consumer (corpus generation, model init, acquisition restarts,
//! training shuffles, ...) draws from `substream(seed, tag, index)`, so adding
//! draws to one stream never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CORPUS: &str = "corpus";
pub const INIT: &str = "init";
pub const PRETRAIN: &str = "pretrain";
pub const FIRST_QUERY: &str = "first-query";
pub const ACQUISITION: &str = "acquisition";
pub const SHUFFLE: &str = "shuffle";

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn substream(seed: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(tag)).wrapping_add(splitmix64(index)))
}

pub fn rng(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream(seed, tag, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn streams_are_stable_and_distinct() {
        assert_eq!(substream(7, INIT, 0), substream(7, INIT, 0));
        let mut seen = HashSet::new();
        for seed in 0..10 {
            for tag in [CORPUS, INIT, PRETRAIN, FIRST_QUERY, ACQUISITION, SHUFFLE] {
                for i in 0..50 {
                    assert!(seen.insert(substream(seed, tag, i)));
                }
            }
        }
    }

    #[test]
    fn known_value() {
        // pins the derivation so saved experiments stay reproducible
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
    }
}
