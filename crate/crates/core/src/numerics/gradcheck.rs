use serde::{Deserialize, Serialize};

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Worst-case disagreement for one parameter tensor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamGradError {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradReport {
    pub eps: f64,
    pub params: Vec<ParamGradError>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= tol)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compare reverse-mode gradients of `loss_fn` against central differences
/// `(f(θ+eps) − f(θ−eps)) / 2eps`, coordinate by coordinate, for every
/// trainable tensor in `store`.
pub fn grad_check<F>(store: &ParamStore, eps: f64, loss_fn: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut graph = Graph::new();
    let loss = loss_fn(&mut graph, store)?;
    if !graph.value(loss).item().is_finite() {
        return Err(Error::Eval("loss is non-finite at the base point".into()));
    }
    let grads = graph.backward(loss);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let mut probe = store.clone();
    let mut report = Vec::new();
    for id in store.trainable_ids() {
        let name = store.name(id).to_string();
        let analytic = grads
            .param(id)
            .map(|t| t.into_data())
            .unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        let mut worst = ParamGradError {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, &a) in analytic.iter().enumerate() {
            let numeric = central_difference(&mut probe, id, i, eps, &eval)
                .map_err(|e| annotate(e, &name))?;
            if !numeric.is_finite() {
                return Err(Error::Eval(format!(
                    "non-finite loss while perturbing parameter `{name}`"
                )));
            }
            let err = relative_error(a, numeric);
            if err > worst.max_rel_error || i == 0 {
                worst = ParamGradError {
                    name: name.clone(),
                    max_rel_error: err,
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
        report.push(worst);
    }
    Ok(GradReport {
        eps,
        params: report,
    })
}

fn central_difference(
    probe: &mut ParamStore,
    id: ParamId,
    i: usize,
    eps: f64,
    eval: &impl Fn(&ParamStore) -> Result<f64>,
) -> Result<f64> {
    let orig = probe.get(id).data()[i];
    probe.get_mut(id).data_mut()[i] = orig + eps;
    let plus = eval(probe);
    probe.get_mut(id).data_mut()[i] = orig - eps;
    let minus = eval(probe);
    probe.get_mut(id).data_mut()[i] = orig;
    Ok((plus? - minus?) / (2.0 * eps))
}

fn annotate(e: Error, name: &str) -> Error {
    match e {
        Error::Eval(msg) => Error::Eval(format!("{msg} (parameter `{name}`)")),
        other => other,
    }
}
