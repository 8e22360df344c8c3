//! Deterministic derivation of per-episode RNG streams.
//!
//! Every random quantity in a run is a pure function of (master seed, domain
//! tag, index), so batches can be generated in parallel in any order while
//! staying bitwise reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep the seed spaces of unrelated sampling stages disjoint.
pub mod domain {
    pub const POLICY_INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const BACKOFF_BASE: u64 = 3;
    pub const EVALUATE: u64 = 4;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a domain tag and index into a fresh seed.
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(tag ^ splitmix64(index)))
}

/// RNG for one episode: `stream` separates episodes, `attempt` separates
/// retries after discarded episodes.
pub fn episode_rng(seed: u64, stream: u64, attempt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 4) | (attempt & 0xF));
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let a = derive_seed(42, domain::TRAIN, 0);
        let b = derive_seed(42, domain::TRAIN, 0);
        assert_eq!(a, b);
        assert_ne!(a, derive_seed(42, domain::TRAIN, 1));
        assert_ne!(a, derive_seed(42, domain::EVALUATE, 0));
        assert_ne!(a, derive_seed(43, domain::TRAIN, 0));
    }

    #[test]
    fn episode_rng_streams_are_independent_and_repeatable() {
        let mut r1 = episode_rng(9, 4, 0);
        let mut r2 = episode_rng(9, 4, 0);
        let mut r3 = episode_rng(9, 5, 0);
        let x1: f64 = r1.random();
        let x2: f64 = r2.random();
        let x3: f64 = r3.random();
        assert_eq!(x1, x2);
        assert_ne!(x1, x3);
    }
}
