//! Positiveness kernel, global and local contrastive losses, and their
//! weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossHyperparams {
    /// Global similarity temperature τ.
    pub tau: f64,
    /// Local similarity temperature τ'.
    pub tau_local: f64,
    /// Mix of the image→report and report→image global directions.
    pub lambda: f64,
    pub gamma: f64,
    pub mu: f64,
    pub nu: f64,
    /// Kernel sharpness β.
    pub beta: f64,
    /// Kernel cutoff T on normalized distance.
    pub cutoff: f64,
    pub smooth_kernel: bool,
}

impl Default for LossHyperparams {
    fn default() -> Self {
        Self {
            tau: 0.1,
            tau_local: 0.3,
            lambda: 0.75,
            gamma: 1.0,
            mu: 0.75,
            nu: 0.75,
            beta: 1.0,
            cutoff: 0.5,
            smooth_kernel: true,
        }
    }
}

impl LossHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau_local > 0.0 && self.beta > 0.0) {
            return Err(config_err!("temperatures and beta must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(config_err!("lambda must lie in [0, 1]"));
        }
        if self.gamma < 0.0 || self.mu < 0.0 || self.nu < 0.0 || self.cutoff < 0.0 {
            return Err(config_err!("loss weights and cutoff must be non-negative"));
        }
        Ok(())
    }
}

/// Soft positive labels between region pairs of an `H x W` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PositivenessMatrix {
    pub grid_h: usize,
    pub grid_w: usize,
    /// `K x K`, row-stochastic.
    pub p: Tensor,
}

/// Grid distance of regions `k` and `l` divided by the grid diagonal.
pub fn normalized_distance(grid_h: usize, grid_w: usize, k: usize, l: usize) -> f64 {
    let (rk, ck) = ((k / grid_w) as f64, (k % grid_w) as f64);
    let (rl, cl) = ((l / grid_w) as f64, (l % grid_w) as f64);
    let diag = ((grid_h * grid_h + grid_w * grid_w) as f64).sqrt();
    ((rk - rl).powi(2) + (ck - cl).powi(2)).sqrt() / diag
}

/// `p_kl ∝ 1[d ≤ T] · e^{-d/β}` (or just the indicator when not smooth),
/// normalized per row. Distances equal to `T` up to rounding count as inside.
pub fn positiveness(grid_h: usize, grid_w: usize, beta: f64, cutoff: f64, smooth: bool) -> PositivenessMatrix {
    let k_total = grid_h * grid_w;
    let tol = 1e-12 * cutoff.max(1.0);
    let mut p = vec![0.0; k_total * k_total];
    for k in 0..k_total {
        let row = &mut p[k * k_total..(k + 1) * k_total];
        for (l, v) in row.iter_mut().enumerate() {
            let d = normalized_distance(grid_h, grid_w, k, l);
            if d <= cutoff + tol {
                *v = if smooth { (-d / beta).exp() } else { 1.0 };
            }
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    PositivenessMatrix {
        grid_h,
        grid_w,
        p: Tensor::matrix(k_total, k_total, p),
    }
}

/// Sum of the diagonal of a square node.
fn trace(g: &mut Graph, x: Var) -> Var {
    let n = g.value(x).rows();
    let eye = g.constant(Tensor::identity(n));
    let d = g.mul(x, eye);
    g.sum(d)
}

/// Instance-level loss over in-batch negatives, averaged over the batch.
pub fn global_loss(g: &mut Graph, zg_image: Var, zg_report: Var, tau: f64, lambda: f64) -> Result<Var> {
    let n = g.value(zg_image).rows();
    let cos = g.cosine_matrix(zg_image, zg_report);
    let logits = g.scale(cos, 1.0 / tau);
    let image_to_report = g.log_softmax(logits, 1)?;
    let logits_t = g.transpose(logits);
    let report_to_image = g.log_softmax(logits_t, 1)?;
    let a = trace(g, image_to_report);
    let b = trace(g, report_to_image);
    let a = g.scale(a, -lambda / n as f64);
    let b = g.scale(b, -(1.0 - lambda) / n as f64);
    Ok(g.add(a, b))
}

/// One sample's share of a local loss:
/// `-(1/2N) Σ_k w_k Σ_l P_kl [log softmax_l(cos(u_k, c_l)/τ') + log softmax_l(cos(c_k, u_l)/τ')]`.
///
/// `weights` (`1 x K`) are detached here, so no gradient reaches the pooling
/// layer through them.
fn local_term(
    g: &mut Graph,
    uni: Var,
    cross: Var,
    positives: &Tensor,
    weights: Var,
    tau_local: f64,
    batch_size: usize,
) -> Result<Var> {
    let cos = g.cosine_matrix(uni, cross);
    let logits = g.scale(cos, 1.0 / tau_local);
    let uni_anchor = g.log_softmax(logits, 1)?;
    let logits_t = g.transpose(logits);
    let cross_anchor = g.log_softmax(logits_t, 1)?;
    let both = g.add(uni_anchor, cross_anchor);
    let p = g.constant(positives.clone());
    let weighted = g.mul(both, p);
    let w = g.detach(weights);
    let per_anchor = g.matmul(w, weighted);
    let total = g.sum(per_anchor);
    Ok(g.scale(total, -1.0 / (2.0 * batch_size as f64)))
}

/// Region-level loss for one sample (regions vs report→image representations).
pub fn local_image_loss(
    g: &mut Graph,
    z_image: Var,
    z_report_to_image: Var,
    positives: &PositivenessMatrix,
    weights: Var,
    tau_local: f64,
    batch_size: usize,
) -> Result<Var> {
    local_term(g, z_image, z_report_to_image, &positives.p, weights, tau_local, batch_size)
}

/// Sentence-level loss for one sample; only `(m, m)` is a positive pair.
pub fn local_report_loss(
    g: &mut Graph,
    z_report: Var,
    z_image_to_report: Var,
    weights: Var,
    tau_local: f64,
    batch_size: usize,
) -> Result<Var> {
    let m = g.value(z_report).rows();
    local_term(
        g,
        z_report,
        z_image_to_report,
        &Tensor::identity(m),
        weights,
        tau_local,
        batch_size,
    )
}

/// Scalar loss values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub global: f64,
    pub local_image: f64,
    pub local_report: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `γ·global + μ·local_image + ν·local_report`.
    pub fn weighted(global: f64, local_image: f64, local_report: f64, gamma: f64, mu: f64, nu: f64) -> Self {
        Self {
            global,
            local_image,
            local_report,
            total: gamma * global + mu * local_image + nu * local_report,
        }
    }

    pub fn components(&self) -> [(&'static str, f64); 4] {
        [
            ("global", self.global),
            ("local_image", self.local_image),
            ("local_report", self.local_report),
            ("total", self.total),
        ]
    }

    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.components()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }

    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let mut out = Self::default();
        for b in items {
            out.global += b.global / n;
            out.local_image += b.local_image / n;
            out.local_report += b.local_report / n;
            out.total += b.total / n;
        }
        out
    }
}

/// Graph nodes of the three components and the total.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub global: Var,
    pub local_image: Var,
    pub local_report: Var,
    pub total: Var,
}

impl LossVars {
    pub fn combine(g: &mut Graph, global: Var, local_image: Var, local_report: Var, gamma: f64, mu: f64, nu: f64) -> Self {
        let a = g.scale(global, gamma);
        let b = g.scale(local_image, mu);
        let c = g.scale(local_report, nu);
        let ab = g.add(a, b);
        let total = g.add(ab, c);
        Self {
            global,
            local_image,
            local_report,
            total,
        }
    }

    pub fn values(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            global: g.value(self.global).item(),
            local_image: g.value(self.local_image).item(),
            local_report: g.value(self.local_report).item(),
            total: g.value(self.total).item(),
        }
    }
}
