//! Entropy-regularized optimal transport over an augmented similarity
//! matrix with per-descriptor dustbin gains.
//!
//! The solver maximizes `⟨P, Ŝ⟩ + λ·H(P)` under marginal constraints that
//! include the dustbin row/column, via alternating Sinkhorn-Knopp scaling.
//! Ŝ holds similarities (negative costs), hence the kernel `exp(+Ŝ/λ)`.
//!
//! The log-domain path is the real implementation: dustbin gains are
//! unbounded model outputs and `exp(Ŝ/λ)` overflows quickly at λ = 0.1. The
//! multiplicative path is kept for cross-checking on tame inputs.

use crate::descriptor::ProjectedDescriptorSet;
use crate::error::{Error, Result};
use crate::linalg::{gelu, Matrix};

/// Two-layer MLP `ℝ^D → ℝ` scoring how much a descriptor prefers the
/// dustbin over any correspondence. Hidden width equals the input dim.
#[derive(Debug, Clone, PartialEq)]
pub struct DustbinHead {
    /// `d × d`, row-major.
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// Output row of the second layer.
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl DustbinHead {
    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    /// `b2 + w2 · gelu(w1·x + b1)` for one descriptor.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut out = self.b2;
        for i in 0..d {
            let z = self.b1[i]
                + self
                    .w1
                    .row(i)
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum::<f64>();
            out += self.w2[i] * gelu(z);
        }
        out
    }
}

/// One dustbin gain per descriptor column.
pub fn dustbin_gains(desc: &ProjectedDescriptorSet, head: &DustbinHead) -> Result<Vec<f64>> {
    if desc.dim() != head.dim() {
        return Err(Error::shape(
            "dustbin_gains",
            format!("descriptors have dim {}, head expects {}", desc.dim(), head.dim()),
        ));
    }
    Ok((0..desc.count())
        .map(|j| head.eval(&desc.descriptors.col(j)))
        .collect())
}

/// The similarity block together with its dustbin border:
///
/// ```text
/// Ŝ = [ s  u ]
///     [ vᵀ ω ]
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSimilarity {
    pub s: Matrix,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub omega: f64,
}

impl AugmentedSimilarity {
    pub fn m_q(&self) -> usize {
        self.s.rows()
    }

    pub fn m_x(&self) -> usize {
        self.s.cols()
    }

    /// The `(M_q+1) × (M_x+1)` matrix with the layout above.
    pub fn assembled(&self) -> Matrix {
        let (m_q, m_x) = (self.m_q(), self.m_x());
        Matrix::from_fn(m_q + 1, m_x + 1, |i, j| match (i == m_q, j == m_x) {
            (false, false) => self.s[(i, j)],
            (false, true) => self.u[i],
            (true, false) => self.v[j],
            (true, true) => self.omega,
        })
    }

    /// Row marginals `a = [1_{M_q}ᵀ, M_x]ᵀ`.
    pub fn row_marginals(&self) -> Vec<f64> {
        let mut a = vec![1.0; self.m_q() + 1];
        a[self.m_q()] = self.m_x() as f64;
        a
    }

    /// Column marginals `b = [1_{M_x}ᵀ, M_q]ᵀ`.
    pub fn col_marginals(&self) -> Vec<f64> {
        let mut b = vec![1.0; self.m_x() + 1];
        b[self.m_x()] = self.m_q() as f64;
        b
    }
}

pub fn assemble_augmented(s: Matrix, u: Vec<f64>, v: Vec<f64>, omega: f64) -> Result<AugmentedSimilarity> {
    if u.len() != s.rows() || v.len() != s.cols() {
        return Err(Error::shape(
            "assemble_augmented",
            format!(
                "block is {}x{}, gains have lengths {} and {}",
                s.rows(),
                s.cols(),
                u.len(),
                v.len()
            ),
        ));
    }
    Ok(AugmentedSimilarity { s, u, v, omega })
}

/// Transport plan with prescribed marginals; the top-left block (dustbin
/// row/column dropped) is the refined similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub p: Matrix,
    pub iterations_run: usize,
    /// Max-abs deviation of row/column sums from the target marginals.
    pub marginal_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtConfig {
    /// Entropy weight λ.
    pub lambda: f64,
    /// Fixed number of column+row update pairs; never residual-based, so the
    /// unrolled gradient graph is deterministic.
    pub iterations: usize,
    pub log_domain: bool,
}

impl Default for OtConfig {
    fn default() -> Self {
        OtConfig {
            lambda: 0.1,
            iterations: 10,
            log_domain: true,
        }
    }
}

impl OtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Solve the entropic OT problem on the augmented matrix.
///
/// Marginals are `a = [1_{M_q}ᵀ, M_x]ᵀ` and `b = [1_{M_x}ᵀ, M_q]ᵀ` (the
/// equal-count case reduces to `a = b = [1_Mᵀ, M]ᵀ`). Each iteration is one
/// column update followed by one row update, so row sums are exact in the
/// returned plan.
pub fn sinkhorn(aug: &AugmentedSimilarity, cfg: &OtConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    let s_hat = aug.assembled();
    solve_plan(&s_hat, &aug.row_marginals(), &aug.col_marginals(), cfg)
}

/// Same solver without the dustbin augmentation: plain marginals of ones on
/// the raw block. Requires a square problem.
pub fn sinkhorn_plain(s: &Matrix, cfg: &OtConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    if s.rows() != s.cols() {
        return Err(Error::shape(
            "sinkhorn_plain",
            format!("plain marginals need M_q == M_x, got {}x{}", s.rows(), s.cols()),
        ));
    }
    solve_plan(s, &vec![1.0; s.rows()], &vec![1.0; s.cols()], cfg)
}

fn solve_plan(s_hat: &Matrix, a: &[f64], b: &[f64], cfg: &OtConfig) -> Result<TransportPlan> {
    if !s_hat.is_finite() {
        return Err(Error::Numeric(
            "sinkhorn: non-finite entries in augmented similarity".into(),
        ));
    }
    let p = if cfg.log_domain {
        solve_log(s_hat, a, b, cfg.lambda, cfg.iterations, false).p
    } else {
        solve_naive(s_hat, a, b, cfg.lambda, cfg.iterations)?
    };
    let marginal_residual = marginal_residual(&p, a, b);
    Ok(TransportPlan {
        p,
        iterations_run: cfg.iterations,
        marginal_residual,
    })
}

pub(crate) fn marginal_residual(p: &Matrix, a: &[f64], b: &[f64]) -> f64 {
    let mut res = 0.0f64;
    for i in 0..p.rows() {
        let sum: f64 = p.row(i).iter().sum();
        res = res.max((sum - a[i]).abs());
    }
    for j in 0..p.cols() {
        let sum: f64 = (0..p.rows()).map(|i| p[(i, j)]).sum();
        res = res.max((sum - b[j]).abs());
    }
    res
}

/// State of the log-domain solve; histories are kept only when requested so
/// the unrolled loop can be differentiated.
#[derive(Debug, Clone)]
pub(crate) struct LogSinkhorn {
    /// `f` after each iteration's row update (index t holds f^(t+1); the
    /// initial potentials are zero).
    pub f_hist: Vec<Vec<f64>>,
    /// `g` after each iteration's column update.
    pub g_hist: Vec<Vec<f64>>,
    pub p: Matrix,
}

/// Log-domain Sinkhorn: potentials `f`, `g` with
/// `P_ij = exp((f_i + g_j + Ŝ_ij)/λ)`.
pub(crate) fn solve_log(
    s_hat: &Matrix,
    a: &[f64],
    b: &[f64],
    lambda: f64,
    iterations: usize,
    keep_history: bool,
) -> LogSinkhorn {
    let (n, k) = (s_hat.rows(), s_hat.cols());
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; k];
    let mut f_hist = Vec::new();
    let mut g_hist = Vec::new();

    for _ in 0..iterations {
        // Column update: g_j ← λ(log b_j − LSE_i((Ŝ_ij + f_i)/λ)).
        for j in 0..k {
            let lse = lse_column(s_hat, &f, j, lambda);
            g[j] = lambda * (log_b[j] - lse);
        }
        if keep_history {
            g_hist.push(g.clone());
        }
        // Row update: f_i ← λ(log a_i − LSE_j((Ŝ_ij + g_j)/λ)).
        for i in 0..n {
            let lse = lse_row(s_hat, &g, i, lambda);
            f[i] = lambda * (log_a[i] - lse);
        }
        if keep_history {
            f_hist.push(f.clone());
        }
    }

    let mut p = Matrix::zeros(n, k);
    for i in 0..n {
        let fi = f[i];
        let row = s_hat.row(i);
        let out = p.row_mut(i);
        for j in 0..k {
            out[j] = ((fi + g[j] + row[j]) / lambda).exp();
        }
    }
    LogSinkhorn { f_hist, g_hist, p }
}

pub(crate) fn lse_row(s_hat: &Matrix, g: &[f64], i: usize, lambda: f64) -> f64 {
    let row = s_hat.row(i);
    let mut max = f64::NEG_INFINITY;
    for j in 0..row.len() {
        max = max.max((row[j] + g[j]) / lambda);
    }
    let mut sum = 0.0;
    for j in 0..row.len() {
        sum += ((row[j] + g[j]) / lambda - max).exp();
    }
    max + sum.ln()
}

pub(crate) fn lse_column(s_hat: &Matrix, f: &[f64], j: usize, lambda: f64) -> f64 {
    let n = s_hat.rows();
    let mut max = f64::NEG_INFINITY;
    for i in 0..n {
        max = max.max((s_hat[(i, j)] + f[i]) / lambda);
    }
    let mut sum = 0.0;
    for i in 0..n {
        sum += ((s_hat[(i, j)] + f[i]) / lambda - max).exp();
    }
    max + sum.ln()
}

/// Multiplicative Sinkhorn on the explicit kernel `K = exp(Ŝ/λ)`. Overflows
/// readily; errors on any non-finite intermediate.
fn solve_naive(s_hat: &Matrix, a: &[f64], b: &[f64], lambda: f64, iterations: usize) -> Result<Matrix> {
    let (n, k) = (s_hat.rows(), s_hat.cols());
    let kernel = Matrix::from_fn(n, k, |i, j| (s_hat[(i, j)] / lambda).exp());
    if !kernel.is_finite() {
        return Err(Error::Numeric("sinkhorn: kernel overflow in naive domain".into()));
    }
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; k];
    for _ in 0..iterations {
        for j in 0..k {
            let dot: f64 = (0..n).map(|i| kernel[(i, j)] * u[i]).sum();
            v[j] = b[j] / dot;
        }
        for i in 0..n {
            let dot: f64 = kernel.row(i).iter().zip(&v).map(|(kij, vj)| kij * vj).sum();
            u[i] = a[i] / dot;
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::Numeric("sinkhorn: scaling overflow in naive domain".into()));
        }
    }
    let p = Matrix::from_fn(n, k, |i, j| u[i] * kernel[(i, j)] * v[j]);
    if !p.is_finite() {
        return Err(Error::Numeric("sinkhorn: non-finite plan in naive domain".into()));
    }
    Ok(p)
}

/// Copy of the plan's top-left block, i.e. the refined similarity matrix
/// with the dustbin row and column dropped.
pub fn refined_block(plan: &TransportPlan) -> Matrix {
    let (m_q, m_x) = (plan.p.rows() - 1, plan.p.cols() - 1);
    Matrix::from_fn(m_q, m_x, |i, j| plan.p[(i, j)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil;
    use rand::Rng;

    fn random_aug(rng: &mut impl Rng, m_q: usize, m_x: usize) -> AugmentedSimilarity {
        let s = Matrix::from_fn(m_q, m_x, |_, _| rng.gen_range(-1.0..1.0));
        let u = (0..m_q).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = (0..m_x).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assemble_augmented(s, u, v, rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn dustbin_gains_all_zero_weights_yield_constant() {
        let head = DustbinHead {
            w1: Matrix::zeros(3, 3),
            b1: vec![0.0; 3],
            w2: vec![0.0; 3],
            b2: 0.75,
        };
        let desc = crate::descriptor::ProjectedDescriptorSet {
            image_id: "x".into(),
            descriptors: testutil::random_unit_columns(&mut testutil::rng(1), 3, 5),
            degenerate: vec![false; 5],
        };
        let gains = dustbin_gains(&desc, &head).unwrap();
        assert_eq!(gains, vec![0.75; 5]);
    }

    #[test]
    fn dustbin_gains_match_hand_computation() {
        // Two hidden units, one descriptor, evaluated by hand.
        let head = DustbinHead {
            w1: Matrix::from_vec(2, 2, vec![0.5, -0.25, 1.0, 0.5]).unwrap(),
            b1: vec![0.1, -0.2],
            w2: vec![2.0, -1.0],
            b2: 0.3,
        };
        let desc = crate::descriptor::ProjectedDescriptorSet {
            image_id: "x".into(),
            descriptors: Matrix::from_vec(2, 1, vec![0.6, 0.8]).unwrap(),
            degenerate: vec![false],
        };
        let z0 = 0.5 * 0.6 + (-0.25) * 0.8 + 0.1;
        let z1 = 1.0 * 0.6 + 0.5 * 0.8 - 0.2;
        let expect = 0.3 + 2.0 * crate::linalg::gelu(z0) - crate::linalg::gelu(z1);
        let gains = dustbin_gains(&desc, &head).unwrap();
        assert!((gains[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn dustbin_gains_length_matches_count() {
        let mut rng = testutil::rng(2);
        let head = DustbinHead {
            w1: testutil::random_matrix(&mut rng, 4, 4),
            b1: vec![0.0; 4],
            w2: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            b2: 0.0,
        };
        let desc = crate::descriptor::ProjectedDescriptorSet {
            image_id: "x".into(),
            descriptors: testutil::random_unit_columns(&mut rng, 4, 7),
            degenerate: vec![false; 7],
        };
        assert_eq!(dustbin_gains(&desc, &head).unwrap().len(), 7);
    }

    #[test]
    fn assemble_layout() {
        let aug = assemble_augmented(
            Matrix::from_vec(1, 1, vec![0.5]).unwrap(),
            vec![0.2],
            vec![0.3],
            1.0,
        )
        .unwrap();
        let m = aug.assembled();
        assert_eq!(m.data(), &[0.5, 0.2, 0.3, 1.0]);
    }

    #[test]
    fn assemble_shapes_and_corner() {
        let mut rng = testutil::rng(3);
        let aug = random_aug(&mut rng, 2, 3);
        let m = aug.assembled();
        assert_eq!((m.rows(), m.cols()), (3, 4));
        assert_eq!(m[(2, 3)], aug.omega);
        assert!(assemble_augmented(Matrix::zeros(2, 3), vec![0.0; 3], vec![0.0; 3], 0.0).is_err());
    }

    #[test]
    fn sinkhorn_symmetric_one_by_one() {
        let aug = assemble_augmented(Matrix::zeros(1, 1), vec![0.0], vec![0.0], 0.0).unwrap();
        for lambda in [0.05, 0.1, 1.0] {
            let plan = sinkhorn(
                &aug,
                &OtConfig {
                    lambda,
                    ..OtConfig::default()
                },
            )
            .unwrap();
            for v in plan.p.data() {
                assert!((v - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sinkhorn_row_sums_exact_after_final_row_update() {
        let mut rng = testutil::rng(4);
        for _ in 0..10 {
            let aug = random_aug(&mut rng, 4, 6);
            let plan = sinkhorn(&aug, &OtConfig::default()).unwrap();
            let a = aug.row_marginals();
            for i in 0..plan.p.rows() {
                let sum: f64 = plan.p.row(i).iter().sum();
                assert!((sum - a[i]).abs() < 1e-9, "row {i}: {sum} vs {}", a[i]);
            }
        }
    }

    #[test]
    fn log_solver_matches_in_crate_naive_path() {
        let mut rng = testutil::rng(5);
        for _ in 0..10 {
            let aug = random_aug(&mut rng, 5, 5);
            // Moderate lambda keeps exp(S/lambda) in range for the naive path.
            let log = sinkhorn(
                &aug,
                &OtConfig {
                    lambda: 0.5,
                    iterations: 50,
                    log_domain: true,
                },
            )
            .unwrap();
            let naive = sinkhorn(
                &aug,
                &OtConfig {
                    lambda: 0.5,
                    iterations: 50,
                    log_domain: false,
                },
            )
            .unwrap();
            for (x, y) in log.p.data().iter().zip(naive.p.data()) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn naive_path_reports_overflow() {
        let aug = assemble_augmented(
            Matrix::from_vec(1, 1, vec![200.0]).unwrap(),
            vec![0.0],
            vec![0.0],
            0.0,
        )
        .unwrap();
        let res = sinkhorn(
            &aug,
            &OtConfig {
                lambda: 0.1,
                iterations: 5,
                log_domain: false,
            },
        );
        assert!(matches!(res, Err(Error::Numeric(_))));
    }

    #[test]
    fn rejects_non_finite_similarity() {
        let aug = assemble_augmented(
            Matrix::from_vec(1, 1, vec![f64::NAN]).unwrap(),
            vec![0.0],
            vec![0.0],
            0.0,
        )
        .unwrap();
        assert!(matches!(sinkhorn(&aug, &OtConfig::default()), Err(Error::Numeric(_))));
    }

    /// Total (ℓ1) marginal violation of a plan.
    fn l1_violation(p: &Matrix, a: &[f64], b: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..p.rows() {
            total += (p.row(i).iter().sum::<f64>() - a[i]).abs();
        }
        for j in 0..p.cols() {
            total += ((0..p.rows()).map(|i| p[(i, j)]).sum::<f64>() - b[j]).abs();
        }
        total
    }

    #[test]
    fn feasibility_drift_shrinks_with_iterations() {
        // The max-abs residual can bump up on rare early iterations; the
        // total marginal violation is the monotone quantity. Check ℓ1
        // monotonicity per step plus the coarse max-abs trend over the whole
        // sweep.
        let mut rng = testutil::rng(6);
        for trial in 0..20 {
            let aug = random_aug(&mut rng, 3 + trial % 4, 3 + (trial / 2) % 4);
            let (a, b) = (aug.row_marginals(), aug.col_marginals());
            let mut prev_l1 = f64::INFINITY;
            let mut first_linf = None;
            let mut last_linf = 0.0;
            for iters in [1usize, 3, 5, 10, 20] {
                let plan = sinkhorn(
                    &aug,
                    &OtConfig {
                        iterations: iters,
                        ..OtConfig::default()
                    },
                )
                .unwrap();
                let l1 = l1_violation(&plan.p, &a, &b);
                assert!(
                    l1 <= prev_l1 * (1.0 + 1e-12) + 1e-12,
                    "trial {trial}: total violation grew from {prev_l1} to {l1} at {iters} iterations"
                );
                prev_l1 = l1;
                first_linf.get_or_insert(plan.marginal_residual);
                last_linf = plan.marginal_residual;
            }
            assert!(last_linf <= first_linf.unwrap() + 1e-12, "trial {trial}: no overall progress");
        }
    }

    #[test]
    fn total_mass_is_conserved() {
        let mut rng = testutil::rng(7);
        for _ in 0..10 {
            let m_q = rng.gen_range(2..7);
            let m_x = rng.gen_range(2..7);
            let aug = random_aug(&mut rng, m_q, m_x);
            let plan = sinkhorn(&aug, &OtConfig::default()).unwrap();
            let total: f64 = plan.p.data().iter().sum();
            assert!((total - (m_q + m_x) as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_shift_leaves_plan_unchanged() {
        let mut rng = testutil::rng(8);
        let aug = random_aug(&mut rng, 4, 5);
        let plan = sinkhorn(&aug, &OtConfig::default()).unwrap();
        for c in [-3.0, 0.7, 12.0] {
            let shifted = AugmentedSimilarity {
                s: Matrix::from_fn(4, 5, |i, j| aug.s[(i, j)] + c),
                u: aug.u.iter().map(|x| x + c).collect(),
                v: aug.v.iter().map(|x| x + c).collect(),
                omega: aug.omega + c,
            };
            let plan_c = sinkhorn(&shifted, &OtConfig::default()).unwrap();
            for (x, y) in plan.p.data().iter().zip(plan_c.p.data()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn large_dustbin_gain_empties_its_row() {
        let mut rng = testutil::rng(9);
        let s = Matrix::from_fn(3, 3, |_, _| rng.gen_range(-0.5..0.5));
        let aug = assemble_augmented(s, vec![20.0, 0.0, 0.0], vec![0.0; 3], 1.0).unwrap();
        let plan = sinkhorn(&aug, &OtConfig::default()).unwrap();
        let refined = refined_block(&plan);
        for j in 0..3 {
            assert!(refined[(0, j)] < 1e-4, "entry {} too large", refined[(0, j)]);
        }
    }

    #[test]
    fn refined_block_of_symmetric_case() {
        let aug = assemble_augmented(Matrix::zeros(1, 1), vec![0.0], vec![0.0], 0.0).unwrap();
        let plan = sinkhorn(&aug, &OtConfig::default()).unwrap();
        let refined = refined_block(&plan);
        assert_eq!((refined.rows(), refined.cols()), (1, 1));
        assert!((refined[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn refined_entries_bounded_by_unit_marginals() {
        let mut rng = testutil::rng(10);
        for _ in 0..10 {
            let aug = random_aug(&mut rng, 4, 4);
            let plan = sinkhorn(&aug, &OtConfig::default()).unwrap();
            let refined = refined_block(&plan);
            for v in refined.data() {
                assert!(*v >= 0.0 && *v <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn strongly_diagonal_similarity_refines_to_near_identity() {
        let n = 4;
        let s = Matrix::from_fn(n, n, |i, j| if i == j { 10.0 } else { 0.0 });
        let aug = assemble_augmented(s, vec![-10.0; n], vec![-10.0; n], 1.0).unwrap();
        let plan = sinkhorn(
            &aug,
            &OtConfig {
                lambda: 0.1,
                iterations: 2000,
                log_domain: true,
            },
        )
        .unwrap();
        let refined = refined_block(&plan);
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (refined[(i, j)] - expect).abs() < 1e-3,
                    "entry ({i},{j}) = {}",
                    refined[(i, j)]
                );
            }
        }
    }

    #[test]
    fn plain_solver_requires_square_block() {
        assert!(sinkhorn_plain(&Matrix::zeros(2, 3), &OtConfig::default()).is_err());
        let plan = sinkhorn_plain(&Matrix::zeros(3, 3), &OtConfig::default()).unwrap();
        for v in plan.p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        let aug = assemble_augmented(Matrix::zeros(1, 1), vec![0.0], vec![0.0], 0.0).unwrap();
        assert!(sinkhorn(
            &aug,
            &OtConfig {
                lambda: 0.0,
                ..OtConfig::default()
            }
        )
        .is_err());
        assert!(sinkhorn(
            &aug,
            &OtConfig {
                iterations: 0,
                ..OtConfig::default()
            }
        )
        .is_err());
    }
}
