//! Seeded randomness helpers shared by the unit tests.

use crate::linalg::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Descriptor matrix with ℓ2-normalized columns.
pub fn random_unit_columns(rng: &mut impl Rng, dim: usize, count: usize) -> Matrix {
    let mut m = Matrix::zeros(dim, count);
    for j in 0..count {
        let col: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (n, _) = crate::linalg::l2_normalize(&col);
        m.set_col(j, &n);
    }
    m
}
