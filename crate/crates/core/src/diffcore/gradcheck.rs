use super::{DiffError, Graph, Inputs, NodeId, ParamStore};

/// Denominator floor of the relative error: entries whose gradients are
/// smaller than this are in effect compared absolutely, so rounding noise on
/// exactly-zero gradients does not register as a 100% error.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// Compares the analytic gradient of `loss` w.r.t. `param` against central
/// differences and returns the largest relative error
/// `|a - c| / max(|a| + |c|, RELATIVE_FLOOR)` over all entries.
pub fn finite_difference_check(
    graph: &Graph,
    params: &ParamStore,
    inputs: &Inputs,
    loss: NodeId,
    param: &str,
    epsilon: f64,
) -> Result<f64, DiffError> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(DiffError::BadEpsilon(epsilon));
    }
    if let Some(kind) = graph.surrogates_between(param, loss)?.first() {
        return Err(DiffError::SurrogateOnPath(kind.name()));
    }
    let analytic = {
        let values = graph.evaluate(params, inputs)?;
        graph.gradient(&values, loss, &[param])?.remove(param).expect("requested gradient")
    };
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for idx in 0..analytic.len() {
        let base = probe.get(param).ok_or_else(|| DiffError::MissingParam(param.into()))?.data()[idx];
        probe.get_mut(param).unwrap().data_mut()[idx] = base + epsilon;
        let plus = graph.evaluate(&probe, inputs)?.scalar(loss);
        probe.get_mut(param).unwrap().data_mut()[idx] = base - epsilon;
        let minus = graph.evaluate(&probe, inputs)?.scalar(loss);
        probe.get_mut(param).unwrap().data_mut()[idx] = base;
        let central = (plus - minus) / (2.0 * epsilon);
        let a = analytic.data()[idx];
        let rel = (a - central).abs() / (a.abs() + central.abs()).max(RELATIVE_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}
