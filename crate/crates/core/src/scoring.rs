//! From a similarity matrix to a scalar image-to-image similarity: strongest
//! vote per descriptor, learnable vote strength, and summation. Also the
//! parameter-free Chamfer and Chamfer+OT baselines.

use crate::descriptor::ProjectedDescriptorSet;
use crate::error::{Error, Result};
use crate::linalg::{matmul_transposed_left, Matrix};
use crate::model::{DustbinMode, ModelParams, VoteFunction};
use crate::transport::{
    assemble_augmented, dustbin_gains, refined_block, sinkhorn, sinkhorn_plain, OtConfig,
};

/// Row- and column-wise max-pooled similarities with their argmax positions
/// (kept for inspection; gradient flow uses the same positions).
#[derive(Debug, Clone, PartialEq)]
pub struct VoteSet {
    pub row_votes: Vec<f64>,
    pub col_votes: Vec<f64>,
    pub row_argmax: Vec<usize>,
    pub col_argmax: Vec<usize>,
}

/// Scalar similarity plus the per-vote breakdown behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScore {
    pub score: f64,
    pub votes: Option<VoteSet>,
    /// Transformed row votes followed by transformed column votes; their sum
    /// equals `score`.
    pub per_vote_strengths: Option<Vec<f64>>,
}

/// Strongest similarity per descriptor of each image: `row_votes[i] =
/// max_j m[i][j]`, `col_votes[j] = max_i m[i][j]`. Argmax ties resolve to
/// the lowest index.
pub fn select_votes(m: &Matrix) -> VoteSet {
    assert!(m.rows() > 0 && m.cols() > 0, "select_votes: empty matrix");
    let mut row_votes = Vec::with_capacity(m.rows());
    let mut row_argmax = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let row = m.row(i);
        let (mut best, mut arg) = (row[0], 0);
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                arg = j;
            }
        }
        row_votes.push(best);
        row_argmax.push(arg);
    }
    let mut col_votes = Vec::with_capacity(m.cols());
    let mut col_argmax = Vec::with_capacity(m.cols());
    for j in 0..m.cols() {
        let (mut best, mut arg) = (m[(0, j)], 0);
        for i in 1..m.rows() {
            let v = m[(i, j)];
            if v > best {
                best = v;
                arg = i;
            }
        }
        col_votes.push(best);
        col_argmax.push(arg);
    }
    VoteSet {
        row_votes,
        col_votes,
        row_argmax,
        col_argmax,
    }
}

/// Transform every vote through `f`; row votes first, then column votes.
pub fn apply_f(votes: &VoteSet, f: &VoteFunction) -> Vec<f64> {
    votes
        .row_votes
        .iter()
        .chain(&votes.col_votes)
        .map(|&v| f.eval(v))
        .collect()
}

/// Vote strength under an optional `f`; without `f` the vote is used as-is,
/// clamped to [0, 1].
pub fn vote_strength(f: Option<&VoteFunction>, vote: f64) -> f64 {
    match f {
        Some(f) => f.eval(vote),
        None => vote.clamp(0.0, 1.0),
    }
}

/// Refined similarity matrix for a pair under the given model: raw cosine
/// block, dustbin gains, entropic OT. Exposed separately so inspection can
/// show intermediate values.
pub fn refined_similarity(
    q: &ProjectedDescriptorSet,
    x: &ProjectedDescriptorSet,
    model: &ModelParams,
    cfg: &OtConfig,
) -> Result<(Matrix, Matrix, Vec<f64>, Vec<f64>)> {
    let s = matmul_transposed_left(&q.descriptors, &x.descriptors)?;
    let (m_q, m_x) = (s.rows(), s.cols());
    let (u, v) = match &model.dustbin {
        DustbinMode::PerDescriptor(head) => (dustbin_gains(q, head)?, dustbin_gains(x, head)?),
        DustbinMode::SharedScalar(c) => (vec![*c; m_q], vec![*c; m_x]),
        DustbinMode::Disabled => {
            let plan = sinkhorn_plain(&s, cfg)?;
            return Ok((s, plan.p, Vec::new(), Vec::new()));
        }
    };
    let aug = assemble_augmented(s, u, v, model.omega)?;
    let plan = sinkhorn(&aug, cfg)?;
    let refined = refined_block(&plan);
    Ok((aug.s, refined, aug.u, aug.v))
}

/// Full scoring pipeline: `S = QᵀX` → dustbin gains → Sinkhorn → refined
/// block → strongest votes → `f` → sum.
pub fn pair_similarity(
    q: &ProjectedDescriptorSet,
    x: &ProjectedDescriptorSet,
    model: &ModelParams,
    cfg: &OtConfig,
) -> Result<PairScore> {
    let (_, refined, _, _) = refined_similarity(q, x, model, cfg)?;
    let votes = select_votes(&refined);
    let strengths: Vec<f64> = votes
        .row_votes
        .iter()
        .chain(&votes.col_votes)
        .map(|&v| vote_strength(model.vote.as_ref(), v))
        .collect();
    let score = strengths.iter().sum::<f64>();
    if !score.is_finite() {
        return Err(Error::Numeric(format!(
            "pair ({}, {}) produced a non-finite score",
            q.image_id, x.image_id
        )));
    }
    Ok(PairScore {
        score,
        votes: Some(votes),
        per_vote_strengths: Some(strengths),
    })
}

/// Vote sum over the raw similarity matrix, no transport and no learned
/// parts. Expects ℓ2-normalized descriptors straight from the backbone.
pub fn chamfer_similarity(q: &ProjectedDescriptorSet, x: &ProjectedDescriptorSet) -> Result<f64> {
    let s = matmul_transposed_left(&q.descriptors, &x.descriptors)?;
    let votes = select_votes(&s);
    Ok(votes.row_votes.iter().sum::<f64>() + votes.col_votes.iter().sum::<f64>())
}

/// Vote sum over the OT-refined matrix with fixed unit dustbin gains
/// (`u = v = 1`, `ω = 1`) and no learned parts.
pub fn chamfer_ot_similarity(
    q: &ProjectedDescriptorSet,
    x: &ProjectedDescriptorSet,
    cfg: &OtConfig,
) -> Result<f64> {
    let s = matmul_transposed_left(&q.descriptors, &x.descriptors)?;
    let (m_q, m_x) = (s.rows(), s.cols());
    let aug = assemble_augmented(s, vec![1.0; m_q], vec![1.0; m_x], 1.0)?;
    let plan = sinkhorn(&aug, cfg)?;
    let refined = refined_block(&plan);
    let votes = select_votes(&refined);
    Ok(votes.row_votes.iter().sum::<f64>() + votes.col_votes.iter().sum::<f64>())
}
