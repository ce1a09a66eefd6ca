//! Deterministic random streams.
//!
//! Every consumer of randomness draws from its own ChaCha8 stream keyed by
//! `(master seed, purpose tag, index)`, so adding draws in one place never
//! shifts the numbers seen elsewhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_extend(FNV_OFFSET, bytes)
}

pub(crate) fn fnv1a64_extend(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the stream `(seed, tag, index)`.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let h = fnv1a64_extend(fnv1a64(&seed.to_le_bytes()), tag.as_bytes());
    splitmix64(h ^ splitmix64(index))
}

pub fn stream(seed: u64, tag: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}

/// Uniform draws from `[-√(6/fan_in), √(6/fan_in)]`.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut StreamRng) -> Tensor {
    let bound = kaiming_bound(fan_in);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..=bound))
}

pub fn kaiming_bound(fan_in: usize) -> f64 {
    libm::sqrt(6.0 / fan_in.max(1) as f64)
}

/// Distinct indices drawn uniformly from `0..n` (partial Fisher-Yates),
/// returned in draw order.
pub fn sample_without_replacement(n: usize, k: usize, rng: &mut StreamRng) -> alloc::vec::Vec<usize> {
    let mut pool: alloc::vec::Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}
