use super::{Graph, OpKind, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// max over coordinates of `|analytic − numeric| / max(1, |analytic|, |numeric|)`
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Checks `d f(x) / dx` for a scalar-valued `f` built on a fresh [`Graph`].
///
/// `f` receives the graph and the tracked input and must return a scalar.
/// `fault` corrupts one op's backward rule in the analytic pass only.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, fault: Option<OpKind>) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Usage(format!("finite-difference step {eps} outside (0, 1e-2]")));
    }

    let mut graph = Graph::new();
    if let Some(kind) = fault {
        graph.inject_backward_fault(kind);
    }
    let input = graph.param(x.clone());
    let out = f(&mut graph, input)?;
    graph.backward(out)?;
    let analytic = graph
        .grad(input)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(probe);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if !err.is_finite() {
            return Err(Error::NonFinite {
                op: format!("gradient comparison at coordinate {i}"),
            });
        }
        if err > report.max_rel_error || i == 0 {
            report = GradCheck {
                max_rel_error: err,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}
