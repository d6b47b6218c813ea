//! Seeded random streams. Every experiment derives its generator from an
//! explicit seed so runs are bit-reproducible.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::Scalar;

pub type SeededRng = ChaCha8Rng;

/// SplitMix64 finalizer, used to decorrelate derived seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for the sub-stream identified by `parts` under `seed`.
pub fn stream(seed: u64, parts: &[u64]) -> SeededRng {
    let mut h = mix64(seed);
    for &p in parts {
        h = mix64(h ^ p);
    }
    SeededRng::seed_from_u64(h)
}

pub fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, std: f64) -> T {
    let z: f64 = rng.sample(StandardNormal);
    T::lit(z * std)
}

pub fn normal_matrix<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    std: f64,
) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || normal(rng, std))
}

pub fn normal_vector<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Array1<T> {
    Array1::from_shape_simple_fn(n, || normal(rng, std))
}

pub fn uniform_matrix<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    lo: f64,
    hi: f64,
) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || T::lit(rng.random_range(lo..hi)))
}
