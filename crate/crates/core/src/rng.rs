//! Deterministic, splittable random streams.
//!
//! Every source of randomness in the engine (weight init, permutation
//! draws, data shuffling, augmentation) is a ChaCha12 stream keyed by a
//! `(seed, domain, fields...)` tuple. Identical tuples reproduce identical
//! streams across runs and platforms; distinct tuples give independent
//! streams without any shared mutable state.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Top-level stream domains. Keeping these disjoint guarantees that e.g.
/// weight initialization can never collide with a shuffle stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Init = 1,
    ShuffleTrain = 2,
    ShuffleEval = 3,
    DataOrder = 4,
    Augment = 5,
    Synthetic = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a ChaCha12 stream from a seed, a domain tag and up to four
/// free-form fields (step counter, layer id, channel/grid id, ...).
pub fn stream(seed: u64, domain: Domain, fields: &[u64]) -> ChaCha12Rng {
    let mut h = splitmix64(seed ^ (domain as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    for &f in fields {
        h = splitmix64(h ^ f.wrapping_mul(0xE703_7ED1_A0B4_28DB));
    }
    let mut key = [0u8; 32];
    let mut z = h;
    for chunk in key.chunks_exact_mut(8) {
        z = splitmix64(z);
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// Uniform index in `[0, n)` via rejection sampling; no modulo bias.
pub fn index(rng: &mut ChaCha12Rng, n: usize) -> usize {
    assert!(n > 0, "index: empty range");
    let n = n as u64;
    // Largest multiple of n that fits in u64.
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return (v % n) as usize;
        }
    }
}

/// In-place Fisher-Yates shuffle driven by `index`, so the result depends
/// only on the stream, not on any library shuffle implementation.
pub fn fisher_yates<T>(rng: &mut ChaCha12Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = index(rng, i + 1);
        items.swap(i, j);
    }
}

/// A fresh permutation of `0..n` drawn from the stream.
pub fn permutation(rng: &mut ChaCha12Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    fisher_yates(rng, &mut p);
    p
}
