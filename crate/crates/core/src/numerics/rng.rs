//! Seeded randomness. Every random draw in the crate goes through an
//! explicitly passed [`Rng`]; there is no global generator.

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::Matrix;

pub type Rng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// SplitMix64 finalizer; used to derive independent stream seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a sub-seed for a named stream, so that adding a consumer of
/// randomness in one place does not shift draws elsewhere.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let mut h = splitmix64(seed);
    for b in stream.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h
}

pub fn stream(seed: u64, name: &str) -> Rng {
    seeded(derive_seed(seed, name))
}

pub fn gaussian(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| gaussian(rng) * std).collect()
}

pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_vec(rows, cols, gaussian_vec(rng, rows * cols, std))
}

pub fn uniform_index(rng: &mut Rng, n: usize) -> usize {
    rng.gen_range(0..n)
}

pub fn uniform(rng: &mut Rng) -> f64 {
    rng.gen::<f64>()
}

/// Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}
