//! Seed handling: every random choice in the crate flows from one u64 seed
//! split into named streams (init, droppath, data, ...), so ablations change
//! exactly one stream at a time.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed for a named stream.
pub fn derive(seed: u64, name: &str) -> u64 {
    let mut state = seed ^ fnv1a(name);
    splitmix64(&mut state)
}

/// Deterministic RNG for the named stream of `seed`.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut state = seed ^ fnv1a(name);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Per-item stream (e.g. one per sample, one per step).
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    stream(derive(seed, name).wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)), name)
}

/// Draw from N(0, std) truncated at +-2 std by rejection.
pub fn trunc_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    let dist = Normal::new(0.0, std).expect("valid std");
    loop {
        let v = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}
