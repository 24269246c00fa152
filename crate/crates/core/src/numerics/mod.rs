//! Dense tensors, reverse-mode differentiation and gradient verification.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradReport, ParamGradError};
pub use graph::{BatchStats, Gradients, Graph, Var, NORM_CLAMP};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

use crate::error::Result;

/// Softmax of a rank-2 tensor along `axis`.
pub fn softmax(v: &Tensor, axis: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(v.clone());
    let y = g.softmax(x, axis)?;
    Ok(g.value(y).clone())
}

/// Cosine similarity of two equal-length vectors.
///
/// Returns the similarity and whether a zero-norm clamp was applied.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> (f64, bool) {
    assert_eq!(a.len(), b.len(), "cosine_sim length mismatch");
    let mut g = Graph::new();
    let va = g.constant(Tensor::row(a.to_vec()));
    let vb = g.constant(Tensor::row(b.to_vec()));
    let s = g.cosine_sim(va, vb);
    (g.value(s).item(), g.degeneracy_warnings() > 0)
}
