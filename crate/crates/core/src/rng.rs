//! Named, seedable random streams.
//!
//! Every consumer of randomness (mask sampling, batch order, negative
//! sampling, parameter init) draws from its own ChaCha8 stream derived from
//! the run seed, a purpose tag and an index. Integer draws go through
//! [`below`] so results do not depend on the platform's `usize` width.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derives an independent stream for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: &str, index: u64) -> StreamRng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed ^ splitmix64(fnv1a(tag)));
    state = splitmix64(state ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)));
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// A 64-bit seed derived from `(seed, tag, index)`, for nesting streams.
pub fn derive(seed: u64, tag: &str, index: u64) -> u64 {
    stream(seed, tag, index).next_u64()
}

/// Unbiased integer in `[0, n)` by rejection on 64-bit draws.
pub fn below<R: RngCore + ?Sized>(rng: &mut R, n: u64) -> u64 {
    assert!(n > 0, "below(0)");
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let x = rng.next_u64();
        if x < zone {
            return x % n;
        }
    }
}

/// Uniform `f64` in `[0, 1)` with 53 random bits.
pub fn unit_f64<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// In-place Fisher–Yates shuffle.
pub fn shuffle<T, R: RngCore + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

/// Draws `k` distinct elements of `pool` uniformly without replacement
/// (partial Fisher–Yates; `pool` is permuted in place, result is its prefix).
pub fn partial_shuffle<T: Copy, R: RngCore + ?Sized>(pool: &mut [T], k: usize, rng: &mut R) -> Vec<T> {
    assert!(k <= pool.len());
    let n = pool.len();
    for i in 0..k {
        let j = i + below(rng, (n - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool[..k].to_vec()
}

/// Random permutation of `0..n`.
pub fn permutation<R: RngCore + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    shuffle(&mut p, rng);
    p
}
