//! Local descriptor sets: strength-based selection and the learnable
//! projection (linear map, layer norm, ℓ2 normalization per descriptor).

use crate::error::{Error, Result};
use crate::linalg::{l2_normalize, layer_norm, Matrix};

/// Descriptors as they arrive from a backbone: a `dim × count` matrix plus a
/// detector strength per descriptor. Strengths are opaque ordering keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDescriptorSet {
    pub image_id: String,
    pub strengths: Vec<f64>,
    /// `dim × count`; column `i` is descriptor `i`.
    pub descriptors: Matrix,
}

impl RawDescriptorSet {
    pub fn new(image_id: impl Into<String>, strengths: Vec<f64>, descriptors: Matrix) -> Result<Self> {
        if strengths.len() != descriptors.cols() {
            return Err(Error::shape(
                "RawDescriptorSet::new",
                format!(
                    "{} strengths for {} descriptors",
                    strengths.len(),
                    descriptors.cols()
                ),
            ));
        }
        if descriptors.rows() == 0 || descriptors.cols() == 0 {
            return Err(Error::shape("RawDescriptorSet::new", "empty descriptor set"));
        }
        Ok(RawDescriptorSet {
            image_id: image_id.into(),
            strengths,
            descriptors,
        })
    }

    pub fn dim(&self) -> usize {
        self.descriptors.rows()
    }

    pub fn count(&self) -> usize {
        self.descriptors.cols()
    }
}

/// Descriptors after dimensionality reduction; every column has unit ℓ2 norm
/// unless flagged degenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedDescriptorSet {
    pub image_id: String,
    /// `dim × count` with unit-norm columns.
    pub descriptors: Matrix,
    /// Per-column zero-norm flags (see [`crate::linalg::l2_normalize`]).
    pub degenerate: Vec<bool>,
}

impl ProjectedDescriptorSet {
    pub fn dim(&self) -> usize {
        self.descriptors.rows()
    }

    pub fn count(&self) -> usize {
        self.descriptors.cols()
    }

    /// ℓ2-normalize raw descriptors without any learned projection. This is
    /// the input convention of the parameter-free Chamfer baselines and of
    /// the projection-free model variant.
    pub fn from_raw_l2(raw: &RawDescriptorSet) -> Self {
        let mut descriptors = Matrix::zeros(raw.dim(), raw.count());
        let mut degenerate = vec![false; raw.count()];
        for j in 0..raw.count() {
            let (col, deg) = l2_normalize(&raw.descriptors.col(j));
            descriptors.set_col(j, &col);
            degenerate[j] = deg;
        }
        ProjectedDescriptorSet {
            image_id: raw.image_id.clone(),
            descriptors,
            degenerate,
        }
    }
}

/// Parameters of the descriptor projection: a linear layer followed by layer
/// normalization, applied per descriptor before ℓ2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    /// `out_dim × in_dim`, row-major.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    pub ln_eps: f64,
}

impl ProjectionParams {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Keep the `m` strongest descriptors, ordered by descending strength with
/// ties broken by lower original column index.
pub fn select_top_m(raw: &RawDescriptorSet, m: usize) -> RawDescriptorSet {
    assert!(m >= 1, "select_top_m: m must be at least 1");
    let mut order: Vec<usize> = (0..raw.count()).collect();
    order.sort_by(|&a, &b| {
        raw.strengths[b]
            .partial_cmp(&raw.strengths[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(m.min(raw.count()));

    let mut descriptors = Matrix::zeros(raw.dim(), order.len());
    let mut strengths = Vec::with_capacity(order.len());
    for (dst, &src) in order.iter().enumerate() {
        descriptors.set_col(dst, &raw.descriptors.col(src));
        strengths.push(raw.strengths[src]);
    }
    RawDescriptorSet {
        image_id: raw.image_id.clone(),
        strengths,
        descriptors,
    }
}

/// Project every descriptor: linear map, layer norm, ℓ2 normalization.
pub fn project(raw: &RawDescriptorSet, params: &ProjectionParams) -> Result<ProjectedDescriptorSet> {
    if params.in_dim() != raw.dim() {
        return Err(Error::shape(
            "project",
            format!(
                "projection expects input dim {}, descriptors have dim {}",
                params.in_dim(),
                raw.dim()
            ),
        ));
    }
    let d = params.out_dim();
    let mut descriptors = Matrix::zeros(d, raw.count());
    let mut degenerate = vec![false; raw.count()];
    for j in 0..raw.count() {
        let col = raw.descriptors.col(j);
        let mut y = params.bias.clone();
        for (i, yi) in y.iter_mut().enumerate() {
            let w_row = params.weight.row(i);
            *yi += w_row.iter().zip(&col).map(|(w, x)| w * x).sum::<f64>();
        }
        let normed = layer_norm(&y, &params.ln_gain, &params.ln_bias, params.ln_eps);
        let (unit, deg) = l2_normalize(&normed);
        descriptors.set_col(j, &unit);
        degenerate[j] = deg;
    }
    Ok(ProjectedDescriptorSet {
        image_id: raw.image_id.clone(),
        descriptors,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil;

    fn raw_set(strengths: Vec<f64>, descriptors: Matrix) -> RawDescriptorSet {
        RawDescriptorSet::new("img", strengths, descriptors).unwrap()
    }

    #[test]
    fn select_top_m_orders_by_strength() {
        let m = Matrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        let raw = raw_set(vec![0.1, 0.9, 0.5], m);
        let sel = select_top_m(&raw, 2);
        assert_eq!(sel.strengths, vec![0.9, 0.5]);
        assert_eq!(sel.descriptors.col(0), raw.descriptors.col(1));
        assert_eq!(sel.descriptors.col(1), raw.descriptors.col(2));
    }

    #[test]
    fn select_top_m_with_large_m_keeps_content() {
        let mut rng = testutil::rng(7);
        let raw = raw_set(
            (0..6).map(|_| testutil::uniform(&mut rng, 0.0, 1.0)).collect(),
            testutil::random_matrix(&mut rng, 3, 6),
        );
        let sel = select_top_m(&raw, 100);
        assert_eq!(sel.count(), 6);
        // Same multiset of (strength, column) pairs.
        for k in 0..6 {
            let col = sel.descriptors.col(k);
            let found = (0..6).any(|j| raw.descriptors.col(j) == col && raw.strengths[j] == sel.strengths[k]);
            assert!(found);
        }
    }

    #[test]
    fn select_top_m_ties_break_toward_lower_index() {
        let m = Matrix::from_fn(1, 4, |_, j| j as f64);
        let raw = raw_set(vec![0.5, 0.9, 0.5, 0.5], m);
        let sel = select_top_m(&raw, 3);
        assert_eq!(sel.descriptors.data(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn select_top_m_matches_sort_oracle() {
        let mut rng = testutil::rng(42);
        let n = 1000;
        let strengths: Vec<f64> = (0..n).map(|_| testutil::uniform(&mut rng, 0.0, 1.0)).collect();
        let raw = raw_set(strengths.clone(), testutil::random_matrix(&mut rng, 4, n));
        let sel = select_top_m(&raw, 600);
        assert_eq!(sel.count(), 600);

        let mut oracle: Vec<(usize, f64)> = strengths.iter().copied().enumerate().collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let expected: std::collections::BTreeSet<u64> =
            oracle[..600].iter().map(|(_, s)| s.to_bits()).collect();
        let got: std::collections::BTreeSet<u64> = sel.strengths.iter().map(|s| s.to_bits()).collect();
        assert_eq!(expected, got);
    }

    #[test]
    fn select_top_m_idempotent() {
        let mut rng = testutil::rng(8);
        let raw = raw_set(
            (0..50).map(|_| testutil::uniform(&mut rng, 0.0, 1.0)).collect(),
            testutil::random_matrix(&mut rng, 5, 50),
        );
        let once = select_top_m(&raw, 20);
        let twice = select_top_m(&once, 20);
        assert_eq!(once, twice);
    }

    fn identity_projection(d: usize) -> ProjectionParams {
        ProjectionParams {
            weight: Matrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.0 }),
            bias: vec![0.0; d],
            ln_gain: vec![1.0; d],
            ln_bias: vec![0.0; d],
            ln_eps: 1e-5,
        }
    }

    #[test]
    fn project_emits_unit_columns() {
        let mut rng = testutil::rng(9);
        let raw = raw_set(
            vec![1.0; 4],
            testutil::random_matrix(&mut rng, 6, 4),
        );
        let out = project(&raw, &identity_projection(6)).unwrap();
        for j in 0..4 {
            assert!(!out.degenerate[j]);
            let norm: f64 = out.descriptors.col(j).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn project_zero_weights_flags_degenerate() {
        let raw = raw_set(vec![1.0; 3], Matrix::from_fn(4, 3, |_, _| 1.0));
        let params = ProjectionParams {
            weight: Matrix::zeros(4, 4),
            bias: vec![0.0; 4],
            ln_gain: vec![1.0; 4],
            ln_bias: vec![0.0; 4],
            ln_eps: 1e-5,
        };
        let out = project(&raw, &params).unwrap();
        for j in 0..3 {
            assert!(out.degenerate[j]);
            assert!(out.descriptors.col(j).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn project_matches_composed_scalar_reference() {
        let mut rng = testutil::rng(10);
        let (d_in, d_out, count) = (7, 5, 6);
        let raw = raw_set(
            vec![1.0; count],
            testutil::random_matrix(&mut rng, d_in, count),
        );
        let params = ProjectionParams {
            weight: testutil::random_matrix(&mut rng, d_out, d_in),
            bias: (0..d_out).map(|_| testutil::uniform(&mut rng, -0.5, 0.5)).collect(),
            ln_gain: (0..d_out).map(|_| testutil::uniform(&mut rng, 0.5, 1.5)).collect(),
            ln_bias: (0..d_out).map(|_| testutil::uniform(&mut rng, -0.5, 0.5)).collect(),
            ln_eps: 1e-5,
        };
        let out = project(&raw, &params).unwrap();

        for j in 0..count {
            let col = raw.descriptors.col(j);
            let mut y = vec![0.0; d_out];
            for i in 0..d_out {
                let mut acc = params.bias[i];
                for k in 0..d_in {
                    acc += params.weight[(i, k)] * col[k];
                }
                y[i] = acc;
            }
            let normed = crate::linalg::layer_norm(&y, &params.ln_gain, &params.ln_bias, params.ln_eps);
            let (unit, _) = crate::linalg::l2_normalize(&normed);
            for i in 0..d_out {
                assert!((out.descriptors[(i, j)] - unit[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn project_never_emits_nan() {
        let mut rng = testutil::rng(12);
        for trial in 0..20 {
            let raw = raw_set(
                vec![1.0; 3],
                testutil::random_matrix(&mut rng, 4, 3),
            );
            let scale = if trial % 2 == 0 { 1e6 } else { 1e-6 };
            let params = ProjectionParams {
                weight: Matrix::from_fn(4, 4, |_, _| testutil::uniform(&mut rng, -scale, scale)),
                bias: vec![0.0; 4],
                ln_gain: vec![1.0; 4],
                ln_bias: vec![0.0; 4],
                ln_eps: 1e-5,
            };
            let out = project(&raw, &params).unwrap();
            assert!(out.descriptors.is_finite());
        }
    }
}
