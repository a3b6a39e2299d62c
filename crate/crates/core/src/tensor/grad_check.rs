//! Central-difference gradient checking.

use rayon::prelude::*;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{IvtError, Result};

/// |analytic − numeric| / max(1, |analytic|, |numeric|)
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(IvtError::config(format!(
            "finite-difference step must lie in [1e-7, 1e-4], got {eps}"
        )));
    }
    Ok(())
}

fn scalar_of(g: &Graph, v: Var, component: usize) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(IvtError::contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    let y = t.item();
    if !y.is_finite() {
        return Err(IvtError::Numeric {
            context: "finite-difference probe".into(),
            index: component,
        });
    }
    Ok(y)
}

/// Largest relative error between the tape gradient of `f` at `x` and a
/// central-difference estimate, over every component of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var> + Sync,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let y = f(&mut g, xv)?;
    scalar_of(&g, y, 0)?;
    g.backward(y)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |i: usize, delta: f64| -> Result<f64> {
        let mut xp = x.clone();
        xp.data_mut()[i] += delta;
        let mut g = Graph::new();
        let v = g.leaf(xp);
        let y = f(&mut g, v).map_err(|e| match e {
            IvtError::Numeric { context, .. } => IvtError::Numeric { context, index: i },
            other => other,
        })?;
        scalar_of(&g, y, i)
    };
    let errors: Vec<Result<f64>> = (0..x.numel())
        .into_par_iter()
        .map(|i| {
            let numeric = (eval(i, eps)? - eval(i, -eps)?) / (2.0 * eps);
            Ok(relative_error(analytic[i], numeric))
        })
        .collect();
    errors
        .into_iter()
        .try_fold(0.0f64, |m, e| Ok(m.max(e?)))
}

/// Like [`grad_check`] but probes parameters of a store. At most
/// `probes_per_param` evenly spaced components of each selected parameter
/// are perturbed.
pub fn grad_check_params<F>(
    store: &ParamStore,
    select: impl Fn(&str) -> bool,
    f: F,
    eps: f64,
    probes_per_param: usize,
) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var> + Sync,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let y = f(&mut g, store)?;
    scalar_of(&g, y, 0)?;
    g.backward(y)?;
    let mut with_grads = store.clone();
    with_grads.collect_grads(&g);

    let mut probes: Vec<(String, usize, f64)> = Vec::new();
    for (name, t) in with_grads.iter() {
        if !select(name) {
            continue;
        }
        let n = t.numel();
        let k = probes_per_param.min(n);
        let grad = t.grad().expect("collect_grads fills every parameter");
        for p in 0..k {
            let i = p * n / k;
            probes.push((name.to_string(), i, grad[i]));
        }
    }

    let eval = |name: &str, i: usize, delta: f64| -> Result<f64> {
        let mut s = store.clone();
        s.get_mut(name).expect("probe names come from the store").data_mut()[i] += delta;
        let mut g = Graph::new();
        let y = f(&mut g, &s)?;
        scalar_of(&g, y, i)
    };
    let errors: Vec<Result<f64>> = probes
        .par_iter()
        .map(|(name, i, analytic)| {
            let numeric = (eval(name, *i, eps)? - eval(name, *i, -eps)?) / (2.0 * eps);
            Ok(relative_error(*analytic, numeric))
        })
        .collect();
    errors
        .into_iter()
        .try_fold(0.0f64, |m, e| Ok(m.max(e?)))
}
