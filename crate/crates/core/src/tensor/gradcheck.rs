use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Binding, ParamSet};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn check_eps(eps: f64) -> Result<()> {
    if (1e-7..=1e-3).contains(&eps) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "grad_check: eps {eps} outside [1e-7, 1e-3]"
        )))
    }
}

fn scalar_output(g: &Graph, out: Var) -> Result<f64> {
    let t = g.value(out);
    if t.is_scalar() {
        Ok(t.item())
    } else {
        Err(Error::InvalidArgument(format!(
            "grad_check: function output has shape {:?}, expected a scalar",
            t.shape()
        )))
    }
}

/// Maximum relative error between backward gradients of `f` at `point`
/// and central finite differences with step `eps`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let evaluate = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p.clone());
        let out = f(&mut g, x)?;
        scalar_output(&g, out)
    };

    let mut g = Graph::new();
    let x = g.leaf(&point.clone().trainable());
    let out = f(&mut g, x)?;
    scalar_output(&g, out)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .get(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + eps;
        let plus = evaluate(&probe)?;
        probe.values_mut()[i] = orig - eps;
        let minus = evaluate(&probe)?;
        probe.values_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// [`grad_check`] over every coordinate of every trainable tensor in
/// `params`. Frozen tensors are bound as constants and are not probed.
pub fn grad_check_params<F>(params: &ParamSet, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &Binding) -> Result<Var>,
{
    check_eps(eps)?;
    let evaluate = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let b = p.bind_frozen(&mut g);
        let out = f(&mut g, &b)?;
        scalar_output(&g, out)
    };

    let mut g = Graph::new();
    let binding = params.bind(&mut g);
    let out = f(&mut g, &binding)?;
    scalar_output(&g, out)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for name in params.trainable_names() {
        let var = binding.get(&name)?;
        let len = params.get(&name)?.numel();
        let analytic = grads
            .get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; len]);
        for i in 0..len {
            let orig = probe.get(&name)?.values()[i];
            probe.get_mut(&name)?.values_mut()[i] = orig + eps;
            let plus = evaluate(&probe)?;
            probe.get_mut(&name)?.values_mut()[i] = orig - eps;
            let minus = evaluate(&probe)?;
            probe.get_mut(&name)?.values_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
    }
    Ok(worst)
}
