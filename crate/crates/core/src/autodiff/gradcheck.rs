//! Central finite-difference gradient checking.
//!
//! The check only ever runs the forward pass. Non-differentiable selections
//! are frozen at the unperturbed point (see [`Graph::evaluate_frozen`]) so
//! that both sides of each difference lie on the same smooth piece.

use super::{AutodiffError, Bindings, Graph, NodeId, Tensor};

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest elementwise `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(position in wrt, element index)` of the worst element.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub elements_checked: usize,
}

/// Relative error with a denominator floor, so exactly-zero gradients
/// compare by absolute error scaled by `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare reverse-mode gradients of `loss` with central differences of
/// step `eps` for every element of every leaf in `wrt`.
///
/// `leaves` must bind every leaf of the graph.
pub fn check_gradients(
    graph: &Graph,
    leaves: &[(NodeId, Tensor)],
    loss: NodeId,
    wrt: &[NodeId],
    eps: f64,
    floor: f64,
) -> Result<GradCheckReport, AutodiffError> {
    fn bind<'a>(graph: &Graph, values: &'a [(NodeId, Tensor)]) -> Bindings<'a> {
        let mut b = Bindings::new(graph);
        for (id, t) in values {
            b.bind(*id, t);
        }
        b
    }

    let mut values: Vec<(NodeId, Tensor)> = leaves.to_vec();
    let base_bindings = bind(graph, leaves);
    let base = graph.evaluate(&base_bindings)?;
    let analytic = graph.backward(&base, loss, wrt)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        elements_checked: 0,
    };

    for (w, target) in wrt.iter().enumerate() {
        let slot = values
            .iter()
            .position(|(id, _)| id == target)
            .ok_or_else(|| AutodiffError::InvalidArgument(format!("node {} is not a bound leaf", target.0)))?;
        for e in 0..values[slot].1.len() {
            let original = values[slot].1.data()[e];
            values[slot].1.data_mut()[e] = original + eps;
            let plus = {
                let b = bind(graph, &values);
                graph.evaluate_frozen(&b, &base)?.value(loss).item()
            };
            values[slot].1.data_mut()[e] = original - eps;
            let minus = {
                let b = bind(graph, &values);
                graph.evaluate_frozen(&b, &base)?.value(loss).item()
            };
            values[slot].1.data_mut()[e] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[w].data()[e];
            let rel = relative_error(a, numeric, floor);
            report.elements_checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst = (w, e);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
