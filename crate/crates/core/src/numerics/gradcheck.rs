//! Central-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::{ParamId, ParameterSet};

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter holding the worst component, if any component was checked.
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub components: usize,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn evaluate<F>(params: &ParameterSet<f64>, forward: &F) -> Result<(f64, bool)>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::new(params.table());
    let root = forward(&mut g)?;
    let value = g.value(root);
    if value.len() != 1 {
        return Err(Error::shape("gradient_check", format!("loss {:?} is not a scalar", value.shape())));
    }
    let loss = value.data()[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "gradient_check loss" });
    }
    Ok((loss, g.is_stochastic()))
}

/// Compares the reverse-mode gradient of `forward` against
/// `(f(θ+ε) - f(θ-ε)) / 2ε` for every scalar parameter component.
///
/// `forward` must be deterministic; a closure that draws dropout masks is
/// rejected. Parameter gradients are overwritten with the analytic gradient.
pub fn gradient_check<F>(params: &mut ParameterSet<f64>, epsilon: f64, forward: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    params.zero_grads();
    {
        let (table, grads) = params.parts_mut();
        let mut g = Graph::new(table);
        let root = forward(&mut g)?;
        if g.is_stochastic() {
            return Err(Error::StochasticClosure);
        }
        if !g.value(root).is_finite() {
            return Err(Error::NonFinite { op: "gradient_check loss" });
        }
        g.backward(root, 1.0, grads)?;
    }

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: None,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        components: 0,
    };
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        for k in 0..params.value(id).len() {
            let original = params.value(id).data()[k];
            params.value_mut(id).data_mut()[k] = original + epsilon;
            let (plus, _) = evaluate(params, &forward)?;
            params.value_mut(id).data_mut()[k] = original - epsilon;
            let (minus, _) = evaluate(params, &forward)?;
            params.value_mut(id).data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = params.grad(id).data()[k];
            let err = relative_error(analytic, numeric);
            report.components += 1;
            if err > report.max_relative_error || report.worst_param.is_none() {
                report.max_relative_error = err;
                report.worst_param = Some(params.name(id).to_string());
                report.worst_index = k;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
