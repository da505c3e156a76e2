//! Manual reverse-mode differentiation of the pair loss with respect to
//! every model parameter.
//!
//! The forward pass records the intermediates needed to walk the pipeline
//! backwards: projection statistics per descriptor, dustbin MLP hidden
//! activations, the per-iteration Sinkhorn potentials (the loop is unrolled,
//! not implicitly differentiated), vote argmax positions, and the scalar MLP
//! activations of `f` and `g`. Max selections route gradient to exactly one
//! entry (lowest index on ties, matching the forward scan).

use crate::descriptor::{ProjectedDescriptorSet, RawDescriptorSet};
use crate::error::{Error, Result};
use crate::linalg::{
    gelu, gelu_derivative, matmul_transposed_left, sigmoid, Matrix, MIN_L2_NORM,
};
use crate::model::{DustbinMode, ModelParams, ScalarMlp, WarpFunction};
use crate::scoring::{select_votes, VoteSet};
use crate::transport::{solve_log, LogSinkhorn, OtConfig};

/// Floor applied inside the loss logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

/// Loss head used when the model has no learnable warp (`w/o g` ablation):
/// plain BCE on `sigmoid(score / tau)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub tau: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec { tau: 10.0 }
    }
}

/// Forward activations of a [`ScalarMlp`].
#[derive(Debug, Clone)]
pub struct ScalarMlpTrace {
    pub input: f64,
    /// Pre-activations `w1·x + b1`.
    pub z: Vec<f64>,
    /// `gelu(z)`.
    pub a: Vec<f64>,
    pub out: f64,
}

pub fn scalar_mlp_forward(mlp: &ScalarMlp, x: f64) -> ScalarMlpTrace {
    let z: Vec<f64> = mlp
        .w1
        .iter()
        .zip(&mlp.b1)
        .map(|(w, b)| w * x + b)
        .collect();
    let a: Vec<f64> = z.iter().map(|&z| gelu(z)).collect();
    let pre = mlp.b2 + mlp.w2.iter().zip(&a).map(|(w, a)| w * a).sum::<f64>();
    ScalarMlpTrace {
        input: x,
        z,
        a,
        out: sigmoid(pre),
    }
}

/// Backward through a [`ScalarMlp`]; accumulates parameter gradients into
/// `grads` and returns `dL/dx`.
pub fn scalar_mlp_backward(
    mlp: &ScalarMlp,
    trace: &ScalarMlpTrace,
    d_out: f64,
    grads: &mut ScalarMlp,
) -> f64 {
    let d_pre = d_out * trace.out * (1.0 - trace.out);
    grads.b2 += d_pre;
    let mut dx = 0.0;
    for i in 0..mlp.w1.len() {
        grads.w2[i] += d_pre * trace.a[i];
        let d_a = d_pre * mlp.w2[i];
        let d_z = d_a * gelu_derivative(trace.z[i]);
        grads.w1[i] += d_z * trace.input;
        grads.b1[i] += d_z;
        dx += d_z * mlp.w1[i];
    }
    dx
}

fn zeros_like_mlp(mlp: &ScalarMlp) -> ScalarMlp {
    ScalarMlp {
        w1: vec![0.0; mlp.w1.len()],
        b1: vec![0.0; mlp.b1.len()],
        w2: vec![0.0; mlp.w2.len()],
        b2: 0.0,
    }
}

fn add_mlp(dst: &mut ScalarMlp, src: &ScalarMlp) {
    for i in 0..src.w1.len() {
        dst.w1[i] += src.w1[i];
        dst.b1[i] += src.b1[i];
        dst.w2[i] += src.w2[i];
    }
    dst.b2 += src.b2;
}

/// Warped binary cross-entropy: `−log g(p)` for positives, `−log(1 − g(p))`
/// for negatives, with the log argument floored at [`LOG_CLAMP`]. Returns
/// the loss, `dloss/dscore`, and the gradients of `g`.
pub fn warped_bce(score: f64, positive: bool, g: &WarpFunction) -> (f64, f64, ScalarMlp) {
    let trace = scalar_mlp_forward(g, score);
    let (loss, d_gout) = bce_terms(trace.out, positive);
    let mut g_grads = zeros_like_mlp(g);
    let d_score = scalar_mlp_backward(g, &trace, d_gout, &mut g_grads);
    (loss, d_score, g_grads)
}

/// `(loss, dloss/dp)` of clamped BCE at probability `p`.
fn bce_terms(p: f64, positive: bool) -> (f64, f64) {
    if positive {
        let arg = p.max(LOG_CLAMP);
        (-arg.ln(), if p > LOG_CLAMP { -1.0 / p } else { 0.0 })
    } else {
        let arg = (1.0 - p).max(LOG_CLAMP);
        (-arg.ln(), if 1.0 - p > LOG_CLAMP { 1.0 / (1.0 - p) } else { 0.0 })
    }
}

/// Per-column projection intermediates for one image.
#[derive(Debug, Clone)]
struct ProjectionTrace {
    /// Normalized pre-gain layer-norm outputs, `d × m`.
    y_hat: Matrix,
    /// `1/sqrt(var + eps)` per column.
    inv_std: Vec<f64>,
    /// ℓ2 norm of the post-layer-norm vector per column.
    norm: Vec<f64>,
    degenerate: Vec<bool>,
}

/// Dustbin head hidden activations for one image, `d × m` each.
#[derive(Debug, Clone)]
struct GainTrace {
    z: Matrix,
    a: Matrix,
}

#[derive(Debug, Clone)]
struct SideTrace {
    raw: RawDescriptorSet,
    set: ProjectedDescriptorSet,
    proj: Option<ProjectionTrace>,
    gains: Vec<f64>,
    gain_trace: Option<GainTrace>,
}

/// Everything recorded by one pair's forward pass.
#[derive(Debug, Clone)]
pub struct PairTrace {
    pub label: bool,
    pub loss: f64,
    pub score: f64,
    q: SideTrace,
    x: SideTrace,
    /// Augmented (or plain, without dustbin) matrix the solver ran on.
    s_hat: Matrix,
    lambda: f64,
    has_dustbin: bool,
    sinkhorn: LogSinkhorn,
    refined: Matrix,
    votes: VoteSet,
    vote_traces: Option<Vec<ScalarMlpTrace>>,
    warp_trace: Option<ScalarMlpTrace>,
    /// Probability the loss head assigned (g output or sigmoid(score/tau)).
    pub prob: f64,
}

impl PairTrace {
    pub fn pair_ids(&self) -> (&str, &str) {
        (&self.q.raw.image_id, &self.x.raw.image_id)
    }

    /// Smallest gap between each vote and the runner-up in its row/column.
    /// Finite-difference checks use this to avoid argmax flips.
    pub fn min_vote_gap(&self) -> f64 {
        let m = &self.refined;
        let mut gap = f64::INFINITY;
        for i in 0..m.rows() {
            let row = m.row(i);
            let mut best = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for &v in row {
                if v > best {
                    second = best;
                    best = v;
                } else if v > second {
                    second = v;
                }
            }
            if second.is_finite() {
                gap = gap.min(best - second);
            }
        }
        for j in 0..m.cols() {
            let mut best = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for i in 0..m.rows() {
                let v = m[(i, j)];
                if v > best {
                    second = best;
                    best = v;
                } else if v > second {
                    second = v;
                }
            }
            if second.is_finite() {
                gap = gap.min(best - second);
            }
        }
        gap
    }
}

fn forward_side(model: &ModelParams, raw: &RawDescriptorSet) -> Result<SideTrace> {
    let (set, proj) = match &model.projection {
        Some(params) => {
            if params.in_dim() != raw.dim() {
                return Err(Error::shape(
                    "forward_pair",
                    format!(
                        "projection expects dim {}, image {:?} has dim {}",
                        params.in_dim(),
                        raw.image_id,
                        raw.dim()
                    ),
                ));
            }
            let d = params.out_dim();
            let m = raw.count();
            let mut y_hat = Matrix::zeros(d, m);
            let mut inv_std = vec![0.0; m];
            let mut norm = vec![0.0; m];
            let mut degenerate = vec![false; m];
            let mut descriptors = Matrix::zeros(d, m);
            for j in 0..m {
                let col = raw.descriptors.col(j);
                let mut y = params.bias.clone();
                for (i, yi) in y.iter_mut().enumerate() {
                    *yi += params
                        .weight
                        .row(i)
                        .iter()
                        .zip(&col)
                        .map(|(w, v)| w * v)
                        .sum::<f64>();
                }
                let n = d as f64;
                let mean = y.iter().sum::<f64>() / n;
                let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + params.ln_eps).sqrt();
                inv_std[j] = inv;
                let mut t = vec![0.0; d];
                for i in 0..d {
                    let yh = (y[i] - mean) * inv;
                    y_hat[(i, j)] = yh;
                    t[i] = yh * params.ln_gain[i] + params.ln_bias[i];
                }
                let l2 = t.iter().map(|v| v * v).sum::<f64>().sqrt();
                norm[j] = l2;
                if l2 <= MIN_L2_NORM {
                    degenerate[j] = true;
                    descriptors.set_col(j, &t);
                } else {
                    let unit: Vec<f64> = t.iter().map(|v| v / l2).collect();
                    descriptors.set_col(j, &unit);
                }
            }
            (
                ProjectedDescriptorSet {
                    image_id: raw.image_id.clone(),
                    descriptors,
                    degenerate: degenerate.clone(),
                },
                Some(ProjectionTrace {
                    y_hat,
                    inv_std,
                    norm,
                    degenerate,
                }),
            )
        }
        None => (ProjectedDescriptorSet::from_raw_l2(raw), None),
    };

    let (gains, gain_trace) = match &model.dustbin {
        DustbinMode::PerDescriptor(head) => {
            if head.dim() != set.dim() {
                return Err(Error::shape(
                    "forward_pair",
                    format!(
                        "dustbin head dim {} vs descriptor dim {}",
                        head.dim(),
                        set.dim()
                    ),
                ));
            }
            let d = head.dim();
            let m = set.count();
            let mut z = Matrix::zeros(d, m);
            let mut a = Matrix::zeros(d, m);
            let mut gains = vec![0.0; m];
            for j in 0..m {
                let col = set.descriptors.col(j);
                let mut out = head.b2;
                for i in 0..d {
                    let zi = head.b1[i]
                        + head
                            .w1
                            .row(i)
                            .iter()
                            .zip(&col)
                            .map(|(w, v)| w * v)
                            .sum::<f64>();
                    let ai = gelu(zi);
                    z[(i, j)] = zi;
                    a[(i, j)] = ai;
                    out += head.w2[i] * ai;
                }
                gains[j] = out;
            }
            (gains, Some(GainTrace { z, a }))
        }
        DustbinMode::SharedScalar(c) => (vec![*c; set.count()], None),
        DustbinMode::Disabled => (Vec::new(), None),
    };

    Ok(SideTrace {
        raw: raw.clone(),
        set,
        proj,
        gains,
        gain_trace,
    })
}

/// Run the full training forward pass for one labeled pair, recording all
/// intermediates. The descriptor sets arrive already truncated to the
/// batch's descriptor count.
pub fn forward_pair(
    model: &ModelParams,
    q_raw: &RawDescriptorSet,
    x_raw: &RawDescriptorSet,
    ot: &OtConfig,
    loss: &LossSpec,
    positive: bool,
) -> Result<PairTrace> {
    ot.validate()?;
    let q = forward_side(model, q_raw)?;
    let x = forward_side(model, x_raw)?;
    let s = matmul_transposed_left(&q.set.descriptors, &x.set.descriptors)?;
    let (m_q, m_x) = (s.rows(), s.cols());

    let has_dustbin = model.has_dustbin();
    let (s_hat, a, b) = if has_dustbin {
        let mut s_hat = Matrix::zeros(m_q + 1, m_x + 1);
        for i in 0..m_q {
            for j in 0..m_x {
                s_hat[(i, j)] = s[(i, j)];
            }
            s_hat[(i, m_x)] = q.gains[i];
        }
        for j in 0..m_x {
            s_hat[(m_q, j)] = x.gains[j];
        }
        s_hat[(m_q, m_x)] = model.omega;
        let mut a = vec![1.0; m_q + 1];
        a[m_q] = m_x as f64;
        let mut b = vec![1.0; m_x + 1];
        b[m_x] = m_q as f64;
        (s_hat, a, b)
    } else {
        if m_q != m_x {
            return Err(Error::shape(
                "forward_pair",
                format!("dustbin-free transport needs M_q == M_x, got {m_q} and {m_x}"),
            ));
        }
        (s, vec![1.0; m_q], vec![1.0; m_x])
    };
    if !s_hat.is_finite() {
        return Err(Error::Numeric(format!(
            "pair ({}, {}): non-finite augmented similarity",
            q_raw.image_id, x_raw.image_id
        )));
    }

    let sinkhorn = solve_log(&s_hat, &a, &b, ot.lambda, ot.iterations, true);
    let refined = if has_dustbin {
        Matrix::from_fn(m_q, m_x, |i, j| sinkhorn.p[(i, j)])
    } else {
        sinkhorn.p.clone()
    };

    let votes = select_votes(&refined);
    let all_votes: Vec<f64> = votes
        .row_votes
        .iter()
        .chain(&votes.col_votes)
        .copied()
        .collect();
    let (score, vote_traces) = match &model.vote {
        Some(f) => {
            let traces: Vec<ScalarMlpTrace> =
                all_votes.iter().map(|&v| scalar_mlp_forward(f, v)).collect();
            (traces.iter().map(|t| t.out).sum::<f64>(), Some(traces))
        }
        None => (
            all_votes.iter().map(|&v| v.clamp(0.0, 1.0)).sum::<f64>(),
            None,
        ),
    };

    let (prob, warp_trace) = match &model.warp {
        Some(g) => {
            let t = scalar_mlp_forward(g, score);
            (t.out, Some(t))
        }
        None => (sigmoid(score / loss.tau), None),
    };
    let (loss_value, _) = bce_terms(prob, positive);
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!(
            "pair ({}, {}): non-finite loss",
            q_raw.image_id, x_raw.image_id
        )));
    }

    Ok(PairTrace {
        label: positive,
        loss: loss_value,
        score,
        q,
        x,
        s_hat,
        lambda: ot.lambda,
        has_dustbin,
        sinkhorn,
        refined,
        votes,
        vote_traces,
        warp_trace,
        prob,
    })
}

/// Gradient of the loss through the unrolled Sinkhorn iterations.
///
/// Walking one iteration back: the row update `f_i = λ(log a_i −
/// LSE_j((Ŝ_ij + g_j)/λ))` has `∂f_i/∂Ŝ_ij = ∂f_i/∂g_j = −σ_ij` with σ the
/// row softmax of `(Ŝ + g)/λ`; the column update is symmetric with the
/// column softmax of `(Ŝ + f)/λ`.
fn sinkhorn_backward(s_hat: &Matrix, lambda: f64, sol: &LogSinkhorn, d_p: &Matrix) -> Matrix {
    let (n, k) = (s_hat.rows(), s_hat.cols());
    let iterations = sol.f_hist.len();
    let mut d_s = Matrix::zeros(n, k);
    let mut d_f = vec![0.0; n];
    let mut d_g = vec![0.0; k];

    // P = exp((f ⊕ g + Ŝ)/λ).
    for i in 0..n {
        for j in 0..k {
            let d_logp = d_p[(i, j)] * sol.p[(i, j)] / lambda;
            d_f[i] += d_logp;
            d_g[j] += d_logp;
            d_s[(i, j)] += d_logp;
        }
    }

    let zeros = vec![0.0; n];
    let mut weights = vec![0.0; n.max(k)];
    for t in (0..iterations).rev() {
        // Row update of iteration t produced f^(t+1) from g^(t+1).
        let g_t = &sol.g_hist[t];
        for i in 0..n {
            let di = d_f[i];
            if di == 0.0 {
                continue;
            }
            let row = s_hat.row(i);
            let mut max = f64::NEG_INFINITY;
            for j in 0..k {
                max = max.max((row[j] + g_t[j]) / lambda);
            }
            let mut sum = 0.0;
            for j in 0..k {
                let w = ((row[j] + g_t[j]) / lambda - max).exp();
                weights[j] = w;
                sum += w;
            }
            for j in 0..k {
                let c = -di * weights[j] / sum;
                d_g[j] += c;
                d_s[(i, j)] += c;
            }
        }
        d_f.iter_mut().for_each(|v| *v = 0.0);

        // Column update of iteration t produced g^(t+1) from f^(t).
        let f_prev: &[f64] = if t == 0 { &zeros } else { &sol.f_hist[t - 1] };
        for j in 0..k {
            let dj = d_g[j];
            if dj == 0.0 {
                continue;
            }
            let mut max = f64::NEG_INFINITY;
            for i in 0..n {
                max = max.max((s_hat[(i, j)] + f_prev[i]) / lambda);
            }
            let mut sum = 0.0;
            for i in 0..n {
                let w = ((s_hat[(i, j)] + f_prev[i]) / lambda - max).exp();
                weights[i] = w;
                sum += w;
            }
            for i in 0..n {
                let c = -dj * weights[i] / sum;
                d_f[i] += c;
                d_s[(i, j)] += c;
            }
        }
        d_g.iter_mut().for_each(|v| *v = 0.0);
    }
    // What remains in d_f is the adjoint of the zero initialization.
    d_s
}

/// Backward through one side's dustbin gains; returns the gradient
/// contribution to the projected descriptors.
fn gains_backward(
    model: &ModelParams,
    side: &SideTrace,
    d_gains: &[f64],
    grads: &mut ModelParams,
) -> Matrix {
    let d = side.set.dim();
    let m = side.set.count();
    let mut d_desc = Matrix::zeros(d, m);
    match (&model.dustbin, &side.gain_trace) {
        (DustbinMode::PerDescriptor(head), Some(trace)) => {
            let g = match &mut grads.dustbin {
                DustbinMode::PerDescriptor(h) => h,
                _ => unreachable!("gradient container shape mismatch"),
            };
            for j in 0..m {
                let du = d_gains[j];
                if du == 0.0 {
                    continue;
                }
                g.b2 += du;
                let col = side.set.descriptors.col(j);
                for i in 0..d {
                    g.w2[i] += du * trace.a[(i, j)];
                    let d_z = du * head.w2[i] * gelu_derivative(trace.z[(i, j)]);
                    g.b1[i] += d_z;
                    let w_row = g.w1.row_mut(i);
                    for (w, &cv) in w_row.iter_mut().zip(&col) {
                        *w += d_z * cv;
                    }
                    let head_row = head.w1.row(i);
                    for l in 0..d {
                        d_desc[(l, j)] += head_row[l] * d_z;
                    }
                }
            }
        }
        (DustbinMode::SharedScalar(_), None) => {
            let g = match &mut grads.dustbin {
                DustbinMode::SharedScalar(c) => c,
                _ => unreachable!("gradient container shape mismatch"),
            };
            *g += d_gains.iter().sum::<f64>();
        }
        (DustbinMode::Disabled, _) => {}
        _ => unreachable!("gain trace / dustbin mode mismatch"),
    }
    d_desc
}

/// Backward through projection (ℓ2 norm, layer norm, linear) for one side.
fn projection_backward(
    model: &ModelParams,
    side: &SideTrace,
    d_desc: &Matrix,
    grads: &mut ModelParams,
) {
    let params = match &model.projection {
        Some(p) => p,
        None => return,
    };
    let trace = side.proj.as_ref().expect("projection trace");
    let g = grads.projection.as_mut().expect("projection gradient slot");
    let d = params.out_dim();
    for j in 0..side.set.count() {
        let d_out = d_desc.col(j);
        if d_out.iter().all(|&v| v == 0.0) {
            continue;
        }
        // ℓ2 normalization: out = t / ‖t‖ (identity for degenerate columns).
        let d_t: Vec<f64> = if trace.degenerate[j] {
            d_out
        } else {
            let out = side.set.descriptors.col(j);
            let dot: f64 = out.iter().zip(&d_out).map(|(o, dv)| o * dv).sum();
            let n = trace.norm[j];
            out.iter()
                .zip(&d_out)
                .map(|(o, dv)| (dv - o * dot) / n)
                .collect()
        };
        // Layer norm with population variance.
        let mut d_yhat = vec![0.0; d];
        for i in 0..d {
            g.ln_gain[i] += d_t[i] * trace.y_hat[(i, j)];
            g.ln_bias[i] += d_t[i];
            d_yhat[i] = d_t[i] * params.ln_gain[i];
        }
        let mean_dyh = d_yhat.iter().sum::<f64>() / d as f64;
        let mean_dyh_yh = (0..d)
            .map(|i| d_yhat[i] * trace.y_hat[(i, j)])
            .sum::<f64>()
            / d as f64;
        let inv = trace.inv_std[j];
        let col = side.raw.descriptors.col(j);
        for i in 0..d {
            let d_y = inv * (d_yhat[i] - mean_dyh - trace.y_hat[(i, j)] * mean_dyh_yh);
            g.bias[i] += d_y;
            let w_row = g.weight.row_mut(i);
            for (w, &cv) in w_row.iter_mut().zip(&col) {
                *w += d_y * cv;
            }
        }
    }
}

/// Accumulate the loss gradient of one traced pair into `grads` (a
/// zeros-like [`ModelParams`] container), scaled by `scale`.
pub fn backward_pair(
    model: &ModelParams,
    trace: &PairTrace,
    loss_spec: &LossSpec,
    scale: f64,
    grads: &mut ModelParams,
) {
    // Loss head.
    let (_, d_prob) = bce_terms(trace.prob, trace.label);
    let d_score = match (&model.warp, &trace.warp_trace) {
        (Some(g), Some(t)) => {
            let mut tmp = zeros_like_mlp(g);
            let ds = scalar_mlp_backward(g, t, d_prob * scale, &mut tmp);
            add_mlp(grads.warp.as_mut().expect("warp gradient slot"), &tmp);
            ds
        }
        // p = sigmoid(score/tau).
        (None, None) => d_prob * scale * trace.prob * (1.0 - trace.prob) / loss_spec.tau,
        _ => unreachable!("warp trace / model mismatch"),
    };

    // Votes: every transformed vote receives d_score; route through f and
    // then to the argmax entry it came from.
    let (m_q, m_x) = (trace.refined.rows(), trace.refined.cols());
    let mut d_refined = Matrix::zeros(m_q, m_x);
    for vote in 0..m_q + m_x {
        let d_vote = match (&model.vote, &trace.vote_traces) {
            (Some(f), Some(traces)) => {
                let mut tmp = zeros_like_mlp(f);
                let dv = scalar_mlp_backward(f, &traces[vote], d_score, &mut tmp);
                add_mlp(grads.vote.as_mut().expect("vote gradient slot"), &tmp);
                dv
            }
            (None, None) => {
                let v = if vote < m_q {
                    trace.votes.row_votes[vote]
                } else {
                    trace.votes.col_votes[vote - m_q]
                };
                if (0.0..=1.0).contains(&v) {
                    d_score
                } else {
                    0.0
                }
            }
            _ => unreachable!("vote trace / model mismatch"),
        };
        if vote < m_q {
            d_refined[(vote, trace.votes.row_argmax[vote])] += d_vote;
        } else {
            let j = vote - m_q;
            d_refined[(trace.votes.col_argmax[j], j)] += d_vote;
        }
    }

    // Refined block → plan adjoint (dustbin row/column carry no loss).
    let d_p = if trace.has_dustbin {
        let mut d_p = Matrix::zeros(m_q + 1, m_x + 1);
        for i in 0..m_q {
            for j in 0..m_x {
                d_p[(i, j)] = d_refined[(i, j)];
            }
        }
        d_p
    } else {
        d_refined
    };

    let d_s_hat = sinkhorn_backward(&trace.s_hat, trace.lambda, &trace.sinkhorn, &d_p);

    // Split the augmented adjoint into block, gains, and corner.
    let (d_s, d_u, d_v) = if trace.has_dustbin {
        let d_s = Matrix::from_fn(m_q, m_x, |i, j| d_s_hat[(i, j)]);
        let d_u: Vec<f64> = (0..m_q).map(|i| d_s_hat[(i, m_x)]).collect();
        let d_v: Vec<f64> = (0..m_x).map(|j| d_s_hat[(m_q, j)]).collect();
        grads.omega += d_s_hat[(m_q, m_x)];
        (d_s, d_u, d_v)
    } else {
        (d_s_hat, Vec::new(), Vec::new())
    };

    // Gains and the raw similarity block both feed the projected
    // descriptors.
    let mut d_q_desc = gains_backward(model, &trace.q, &d_u, grads);
    let mut d_x_desc = gains_backward(model, &trace.x, &d_v, grads);

    // S = QᵀX: dQ += X·dSᵀ, dX += Q·dS.
    let dim = trace.q.set.dim();
    for dd in 0..dim {
        let x_row = trace.x.set.descriptors.row(dd);
        let q_row = trace.q.set.descriptors.row(dd);
        for i in 0..m_q {
            let ds_row = d_s.row(i);
            let mut acc = 0.0;
            for j in 0..m_x {
                acc += ds_row[j] * x_row[j];
            }
            d_q_desc[(dd, i)] += acc;
        }
        for j in 0..m_x {
            let mut acc = 0.0;
            for i in 0..m_q {
                acc += q_row[i] * d_s[(i, j)];
            }
            d_x_desc[(dd, j)] += acc;
        }
    }

    projection_backward(model, &trace.q, &d_q_desc, grads);
    projection_backward(model, &trace.x, &d_x_desc, grads);
}
