//! Dense row-major matrices and the elementwise nonlinearities used across
//! the pipeline.
//!
//! All training math is `f64`; a separate `f32` path exists only for the
//! latency benchmark (see [`crate::inference`]).

use crate::error::{Error, Result};

/// Columns with an ℓ2 norm at or below this are treated as degenerate and
/// passed through [`l2_normalize`] unchanged.
pub const MIN_L2_NORM: f64 = 1e-12;

/// Dense row-major `f64` matrix.
///
/// For a descriptor set the layout is `dim × count`: each column is one
/// descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copy of column `j`.
    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_col(&mut self, j: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self[(i, j)] = v;
        }
    }

    pub fn transposed(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `out[i][j] = Σ_d q[d][i] · x[d][j]`, i.e. the Gram matrix of the columns
/// of `q` against the columns of `x`.
///
/// Both inputs are `dim × count` descriptor matrices sharing `dim`.
pub fn matmul_transposed_left(q: &Matrix, x: &Matrix) -> Result<Matrix> {
    if q.rows != x.rows {
        return Err(Error::shape(
            "matmul_transposed_left",
            format!("lhs has {} rows, rhs has {} rows", q.rows, x.rows),
        ));
    }
    let (m_q, m_x) = (q.cols, x.cols);
    let mut out = Matrix::zeros(m_q, m_x);
    // Accumulate rank-1 updates; the inner loop runs over a contiguous row
    // of both x and out.
    for d in 0..q.rows {
        let q_row = q.row(d);
        let x_row = x.row(d);
        for i in 0..m_q {
            let qdi = q_row[i];
            let out_row = out.row_mut(i);
            for (o, &xv) in out_row.iter_mut().zip(x_row) {
                *o += qdi * xv;
            }
        }
    }
    Ok(out)
}

/// Exact Gaussian-CDF GELU: `x · Φ(x)` with `Φ` evaluated through `erf`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Derivative of [`gelu`]: `Φ(x) + x · φ(x)`.
pub fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

fn normal_cdf(x: f64) -> f64 {
    // erfc form keeps the deep negative tail accurate; 1 + erf(x/√2) cancels
    // to zero there.
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `1 / (1 + exp(−x))`, saturating to 0/1 without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(v − mean) / sqrt(var + eps) · gain + bias` with population (1/N)
/// variance.
pub fn layer_norm(v: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    assert_eq!(v.len(), gain.len(), "layer_norm: gain length");
    assert_eq!(v.len(), bias.len(), "layer_norm: bias length");
    assert!(eps >= 0.0, "layer_norm: negative eps");
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    v.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&x, (&g, &b))| (x - mean) * inv * g + b)
        .collect()
}

/// ℓ2-normalize, returning `(vector, degenerate)`. Vectors with norm at or
/// below [`MIN_L2_NORM`] come back unchanged with the flag set, so padded or
/// zeroed descriptors cannot inject NaN downstream.
pub fn l2_normalize(v: &[f64]) -> (Vec<f64>, bool) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= MIN_L2_NORM {
        (v.to_vec(), true)
    } else {
        (v.iter().map(|x| x / norm).collect(), false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_identity_passes_through() {
        let q = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Matrix::from_vec(2, 2, vec![3.0, -1.5, 0.25, 7.0]).unwrap();
        let s = matmul_transposed_left(&q, &x).unwrap();
        assert_eq!(s.data(), x.data());
    }

    #[test]
    fn matmul_unit_vector_self_similarity() {
        let q = Matrix::from_vec(2, 1, vec![0.6, 0.8]).unwrap();
        let s = matmul_transposed_left(&q, &q).unwrap();
        assert_eq!(s.rows(), 1);
        assert_eq!(s.cols(), 1);
        assert!((s[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::testutil::rng(11);
        let q = crate::testutil::random_matrix(&mut rng, 3, 4);
        let x = crate::testutil::random_matrix(&mut rng, 3, 5);
        let s = matmul_transposed_left(&q, &x).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut expect = 0.0;
                for d in 0..3 {
                    expect += q[(d, i)] * x[(d, j)];
                }
                assert!((s[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_dim_mismatch() {
        let q = Matrix::zeros(3, 2);
        let x = Matrix::zeros(4, 2);
        assert!(matmul_transposed_left(&q, &x).is_err());
    }

    #[test]
    fn gelu_known_values() {
        assert_eq!(gelu(0.0), 0.0);
        // x·Φ(x) from an extended-precision erf evaluation.
        assert!((gelu(1.0) - 0.841344746068543).abs() < 1e-6);
        let tail = gelu(-10.0);
        assert!(tail < 0.0, "deep negative tail keeps sign");
        assert!((tail - (-7.619853024160525e-23)).abs() < 1e-28);
    }

    #[test]
    fn gelu_shape_on_grid() {
        // Exact GELU is not monotone: it decreases from 0⁻ down to its
        // minimum near x ≈ −0.7518 and is nondecreasing to the right of it
        // (consistent with gelu(−10) ≈ −7.6e-23 > gelu(−1)). Check both arms
        // on a 10,001-point grid over [−8, 8].
        let grid: Vec<f64> = (0..=10_000).map(|k| -8.0 + 16.0 * k as f64 / 10_000.0).collect();
        let mut prev = f64::NEG_INFINITY;
        for &x in grid.iter().filter(|&&x| x >= -0.75) {
            let y = gelu(x);
            assert!(y >= prev, "gelu not nondecreasing at x={x}");
            prev = y;
        }
        let mut prev = f64::INFINITY;
        for &x in grid.iter().filter(|&&x| x <= -0.76) {
            let y = gelu(x);
            assert!(y <= prev, "gelu not nonincreasing at x={x}");
            prev = y;
        }
        // The minimum sits between the arms.
        let min = grid.iter().map(|&x| gelu(x)).fold(f64::INFINITY, f64::min);
        assert!((min - (-0.17)).abs() < 0.01);
    }

    #[test]
    fn sigmoid_known_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        let s = sigmoid(800.0);
        assert!(s.is_finite());
        assert_eq!(s, 1.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert!((sigmoid(2.0) - 0.880797077977882).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_complement_symmetry() {
        for k in 0..=1000 {
            let x = -50.0 + k as f64 * 0.1;
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_hand_case() {
        let out = layer_norm(&[1.0, 2.0, 3.0], &[1.0; 3], &[0.0; 3], 0.0);
        // mean 2, population variance 2/3.
        let e = 1.224744871391589;
        assert!((out[0] + e).abs() < 1e-12);
        assert!(out[1].abs() < 1e-12);
        assert!((out[2] - e).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_vector_yields_bias() {
        let out = layer_norm(&[4.0; 5], &[2.0; 5], &[-1.0; 5], 1e-5);
        for v in out {
            assert!((v + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_single_element() {
        let out = layer_norm(&[5.0], &[2.0], &[3.0], 1.0);
        assert_eq!(out, vec![3.0]);
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut rng = crate::testutil::rng(3);
        for _ in 0..20 {
            let v: Vec<f64> = (0..16).map(|_| crate::testutil::uniform(&mut rng, -3.0, 3.0)).collect();
            let out = layer_norm(&v, &[1.0; 16], &[0.0; 16], 0.0);
            let mean = out.iter().sum::<f64>() / 16.0;
            let var = out.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn l2_normalize_cases() {
        let (v, deg) = l2_normalize(&[3.0, 4.0]);
        assert!(!deg);
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);

        let (z, deg) = l2_normalize(&[0.0, 0.0]);
        assert!(deg);
        assert_eq!(z, vec![0.0, 0.0]);

        let mut rng = crate::testutil::rng(5);
        let big: Vec<f64> = (0..128).map(|_| crate::testutil::uniform(&mut rng, -1.0, 1.0)).collect();
        let (n, deg) = l2_normalize(&big);
        assert!(!deg);
        let norm = n.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn l2_norm_is_unit_for_nonzero(v in proptest::collection::vec(-100.0f64..100.0, 1..40)) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
            let (n, deg) = l2_normalize(&v);
            prop_assert!(!deg);
            let norm = n.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn normalized_gram_entries_are_cosines(
            cols in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 6), 2..6),
        ) {
            let usable: Vec<Vec<f64>> = cols
                .iter()
                .map(|c| l2_normalize(c).0)
                .collect();
            let m = Matrix::from_fn(6, usable.len(), |d, j| usable[j][d]);
            let s = matmul_transposed_left(&m, &m).unwrap();
            for v in s.data() {
                prop_assert!(*v >= -1.0 - 1e-9 && *v <= 1.0 + 1e-9);
            }
        }
    }
}
