//! Deterministic seed derivation.
//!
//! Every randomized component derives its randomness from a single caller
//! seed through the helpers here, so a run is reproducible bit-for-bit across
//! platforms and releases. The mixer is a SplitMix64 finalizer folded over
//! the derivation path; string components are folded in via FNV-1a.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer over one increment of the input.
fn mix64(z: u64) -> u64 {
    let mut z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into `seed`, producing a new 64-bit seed.
///
/// Independent derivation paths (different lengths or values) yield
/// independent-looking seeds.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut acc = mix64(seed);
    for &p in parts {
        acc = mix64(acc ^ mix64(p));
    }
    acc
}

/// Stable 64-bit FNV-1a hash of a string, for mixing identifiers into seeds.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic RNG for the derivation path `(seed, parts)`.
pub fn derive_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, parts))
}

/// Maps a hash to a uniform value in `[0, 1)` using the top 53 bits.
pub fn unit_f64(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
