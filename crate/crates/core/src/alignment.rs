//! Cross-modal alignment: one attention model with shared query-key, value
//! and output matrices serves both the image→report and report→image
//! directions.
//!
//! Matrices act on column vectors (`Q z`); with row-major stacks of
//! representations this is `Z Qᵀ`.

use crate::error::Result;
use crate::numerics::{Graph, Var};

/// Alignment probabilities and cross-modal representations of one sample.
#[derive(Clone, Copy, Debug)]
pub struct AlignmentResult {
    /// `M x K`: sentence m attending over regions.
    pub alpha_image_to_report: Var,
    /// `K x M`: region k attending over sentences.
    pub alpha_report_to_image: Var,
    /// `M x d^Z`: sentence representations computed from regions.
    pub image_to_report: Var,
    /// `K x d^Z`: region representations computed from sentences.
    pub report_to_image: Var,
}

/// Bound alignment matrices (as graph nodes) for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AlignMatrices {
    pub q_t: Var,
    pub v_t: Var,
    pub o_t: Var,
}

impl AlignMatrices {
    pub fn bind(g: &mut Graph, q: Var, v: Var, o: Var) -> Self {
        Self {
            q_t: g.transpose(q),
            v_t: g.transpose(v),
            o_t: g.transpose(o),
        }
    }
}

/// Scaled dot-product scores `(Q z_q)ᵀ(Q z_k) / √d` as an `n_q x n_k` matrix.
pub fn align_scores(g: &mut Graph, queries: Var, keys: Var, q_t: Var) -> Var {
    let d = g.value(queries).cols();
    let qq = g.matmul(queries, q_t);
    let kq = g.matmul(keys, q_t);
    let kq_t = g.transpose(kq);
    let s = g.matmul(qq, kq_t);
    g.scale(s, 1.0 / (d as f64).sqrt())
}

/// Row-stochastic alignment probabilities of queries over keys.
pub fn align_probs(g: &mut Graph, queries: Var, keys: Var, q_t: Var) -> Result<Var> {
    let s = align_scores(g, queries, keys, q_t);
    g.softmax(s, 1)
}

/// `O (Σ_k α_k V z_k)` for every row of `alpha` (`n_q x n_k`).
pub fn cross_modal(g: &mut Graph, alpha: Var, sources: Var, v_t: Var, o_t: Var) -> Var {
    let values = g.matmul(sources, v_t);
    let mixed = g.matmul(alpha, values);
    g.matmul(mixed, o_t)
}

/// Both alignment directions from one score matrix.
pub fn align(
    g: &mut Graph,
    z_image: Var,
    z_report: Var,
    m: &AlignMatrices,
) -> Result<AlignmentResult> {
    let scores = align_scores(g, z_report, z_image, m.q_t);
    let alpha_i2r = g.softmax(scores, 1)?;
    let scores_t = g.transpose(scores);
    let alpha_r2i = g.softmax(scores_t, 1)?;
    let image_to_report = cross_modal(g, alpha_i2r, z_image, m.v_t, m.o_t);
    let report_to_image = cross_modal(g, alpha_r2i, z_report, m.v_t, m.o_t);
    Ok(AlignmentResult {
        alpha_image_to_report: alpha_i2r,
        alpha_report_to_image: alpha_r2i,
        image_to_report,
        report_to_image,
    })
}
