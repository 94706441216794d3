use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compare reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar from the given parameter leaves and must be a pure
/// function of them (fix any rng seed inside the closure). Returns the max
/// over all entries of `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let mut graph = Graph::new();
    let leaves: Vec<Var> = params.iter().map(|p| graph.variable(p.clone())).collect();
    let loss = f(&mut graph, &leaves)?;
    let grads = graph.backward(loss)?;

    let mut eval = |values: &[Tensor], param: usize, entry: usize| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFiniteCheck { param, entry });
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    let mut values = params.to_vec();
    for (pi, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(*leaf)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; params[pi].numel()]);
        for e in 0..params[pi].numel() {
            let orig = params[pi].data()[e];
            values[pi].data_mut()[e] = orig + eps;
            let plus = eval(&values, pi, e)?;
            values[pi].data_mut()[e] = orig - eps;
            let minus = eval(&values, pi, e)?;
            values[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[e];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
