//! Central finite-difference oracle for graph gradients.

use super::graph::{Graph, Tensor};
use super::params::{ParamId, ParamStore};
use crate::error::Result;

/// Relative error `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

/// Compares the backward gradient of `f` at `x` against central differences
/// with step `h`, coordinate by coordinate. Returns the largest relative error.
///
/// Functions with kinks (ReLU, PReLU, abs) must be probed away from them;
/// callers nudge inputs so that no coordinate sits within `h` of a kink.
pub fn finite_diff_check<F>(f: F, x: &[f64], shape: &[usize], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Tensor) -> Result<Tensor>,
{
    let mut g = Graph::new();
    let xt = g.variable(x.to_vec(), shape)?;
    let loss = f(&mut g, xt)?;
    g.backward(loss)?;
    let analytic = g.grad(xt).map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |xs: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let xt = g.variable(xs, shape)?;
        let loss = f(&mut g, xt)?;
        Ok(g.item(loss))
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Same check for selected parameter coordinates of a model whose loss is
/// built by `f` from a fresh graph.
pub fn param_diff_check<F>(store: &ParamStore, f: F, coords: &[(ParamId, usize)], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Tensor>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    let mut with_grads = store.clone();
    with_grads.zero_grads();
    g.accumulate_param_grads(&mut with_grads);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, s)?;
        Ok(g.item(loss))
    };
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for &(id, i) in coords {
        let analytic = with_grads.get(id).grad.as_ref().map_or(0.0, |g| g[i]);
        let orig = probe.get(id).values[i];
        probe.get_mut(id).values[i] = orig + h;
        let up = eval(&probe)?;
        probe.get_mut(id).values[i] = orig - h;
        let down = eval(&probe)?;
        probe.get_mut(id).values[i] = orig;
        worst = worst.max(relative_error(analytic, (up - down) / (2.0 * h)));
    }
    Ok(worst)
}
