use super::{Graph, ParamSet, ParamVars, Var};
use crate::error::{Error, Result};

/// A scalar loss built on a fresh graph from declared parameters.
pub trait LossGraph {
    fn build(&self, g: &mut Graph, params: &ParamVars) -> Result<Var>;
}

impl<F> LossGraph for F
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    fn build(&self, g: &mut Graph, params: &ParamVars) -> Result<Var> {
        self(g, params)
    }
}

/// Evaluates the loss and its gradient with respect to every parameter.
pub fn forward_backward<L: LossGraph + ?Sized>(params: &ParamSet, loss: &L) -> Result<(f32, ParamSet)> {
    let mut g = Graph::new();
    let vars = g.params(params)?;
    let out = loss.build(&mut g, &vars)?;
    let value = g.value(out).item();
    let grads = g.backward(out)?.params(&g, &vars)?;
    Ok((value, grads))
}

/// Forward pass only.
pub fn forward<L: LossGraph + ?Sized>(params: &ParamSet, loss: &L) -> Result<f32> {
    let mut g = Graph::new();
    let vars = g.frozen(params)?;
    let out = loss.build(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Max over all scalars of `|analytic - numeric| / max(1, |analytic|)`, the
/// numeric derivative being a five-point central difference with step `eps`.
pub fn finite_diff_check<L: LossGraph + ?Sized>(loss: &L, params: &ParamSet, eps: f32) -> Result<f64> {
    let (value, grads) = forward_backward(params, loss)?;
    let again = forward(params, loss)?;
    if value.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!("loss {value} then {again}")));
    }
    compare_gradients(loss, params, &grads, eps)
}

/// Checks supplied gradients against central differences of `loss`.
pub fn compare_gradients<L: LossGraph + ?Sized>(
    loss: &L,
    params: &ParamSet,
    analytic: &ParamSet,
    eps: f32,
) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidArgument(format!("finite-difference step {eps} outside (0, 1e-2]")));
    }
    params.check_same_structure(analytic)?;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let n = params.expect(name)?.len();
        let grad = analytic.expect(name)?.data().to_vec();
        for j in 0..n {
            let orig = params.expect(name)?.data()[j];
            let mut at = |x: f32| -> Result<f64> {
                probe.get_mut(name).unwrap().data_mut()[j] = x;
                Ok(forward(&probe, loss)? as f64)
            };
            let (p1, m1, p2, m2) = (orig + eps, orig - eps, orig + 2.0 * eps, orig - 2.0 * eps);
            let (lp1, lm1, lp2, lm2) = (at(p1)?, at(m1)?, at(p2)?, at(m2)?);
            probe.get_mut(name).unwrap().data_mut()[j] = orig;
            // five-point stencil: truncation error O(h^4)
            let h = (p1 as f64 - m1 as f64) / 2.0;
            let fd = (8.0 * (lp1 - lm1) - (lp2 - lm2)) / (12.0 * h);
            let a = grad[j] as f64;
            let err = (a - fd).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
