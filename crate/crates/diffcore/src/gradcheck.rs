use crate::eval::{backward_from_values, evaluate};
use crate::graph::{Graph, NodeId, Op};
use crate::{DiffError, Tensor, TensorMap};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Leaf name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Entries whose perturbation moves a relu or |·| input across or near
    /// its kink at zero.
    pub skipped: usize,
}

/// Worst relative error between `backward` and central differences with the
/// given `step`, over every scalar entry of every bound leaf.
pub fn grad_check(graph: &Graph, bindings: &TensorMap, loss: NodeId, step: f64) -> Result<f64, DiffError> {
    grad_check_report(graph, bindings, loss, step).map(|r| r.max_rel_error)
}

pub fn grad_check_report(
    graph: &Graph,
    bindings: &TensorMap,
    loss: NodeId,
    step: f64,
) -> Result<GradCheckReport, DiffError> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let base = evaluate(graph, bindings)?;
    let analytic = backward_from_values(graph, &base, loss)?;
    let kink_inputs: Vec<NodeId> = graph
        .ops()
        .iter()
        .filter(|op| op.has_kink())
        .flat_map(Op::inputs)
        .collect();

    let mut report = GradCheckReport::default();
    let mut probe = bindings.clone();
    for name in graph.leaf_names() {
        let n = bindings
            .get(name)
            .ok_or_else(|| DiffError::UnboundLeaf(name.to_owned()))?
            .numel();
        for i in 0..n {
            let original = probe.get(name).map(|t| t.data()[i]).unwrap_or_default();
            set_entry(&mut probe, name, i, original + step);
            let plus = evaluate(graph, &probe)?;
            set_entry(&mut probe, name, i, original - step);
            let minus = evaluate(graph, &probe)?;
            set_entry(&mut probe, name, i, original);

            if crosses_kink(&kink_inputs, &base, &plus, &minus, step) {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus[loss.0].item() - minus[loss.0].item()) / (2.0 * step);
            let exact = analytic.get(name).map(|t| t.data()[i]).unwrap_or_default();
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            let rel = (exact - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.to_owned(), i));
            }
        }
    }
    Ok(report)
}

fn set_entry(map: &mut TensorMap, name: &str, i: usize, value: f64) {
    if let Some(t) = map.get_mut(name) {
        t.data_mut()[i] = value;
    }
}

fn crosses_kink(kinks: &[NodeId], base: &[Tensor], plus: &[Tensor], minus: &[Tensor], step: f64) -> bool {
    kinks.iter().any(|id| {
        let (b, p, m) = (&base[id.0], &plus[id.0], &minus[id.0]);
        b.data()
            .iter()
            .zip(p.data().iter().zip(m.data()))
            .any(|(&x0, (&xp, &xm))| {
                let moved = xp != x0 || xm != x0;
                moved && (x0.abs() < 10.0 * step || xp.signum() != xm.signum())
            })
    })
}
