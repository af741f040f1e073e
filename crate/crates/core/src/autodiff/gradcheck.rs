//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever reads forward values, so it stays independent
//! of every backward rule it is used to validate.

use super::graph::{Graph, Var};
use super::params::{Bound, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub label: String,
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub rel_error: f64,
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)` over the whole gradient tensor.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

/// Checks `∂f/∂inputᵢ` for each input tensor.
pub fn check_inputs<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let l = f(&mut g, &vars)?;
        Ok(g.value(l).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;

    let mut out = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v);
        let mut numeric = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            numeric.data_mut()[i] = (up - down) / (2.0 * eps);
        }
        let rel_error = relative_error(analytic.data(), numeric.data());
        out.push(GradCheck {
            label: format!("input{k}"),
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(out)
}

/// Checks `∂f/∂θ` for the listed parameters of `store`.
///
/// `max_coords` caps how many coordinates of each parameter are perturbed
/// (evenly strided); the analytic gradient is compared on those coordinates.
pub fn check_params<F>(store: &ParamStore, ids: &[ParamId], eps: f64, max_coords: usize, f: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let b = s.bind(&mut g);
        let l = f(&mut g, &b)?;
        Ok(g.value(l).item())
    };

    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let loss = f(&mut g, &bound)?;
    g.backward(loss)?;

    let mut work = store.clone();
    let mut out = Vec::new();
    for &id in ids {
        let full = g.grad(bound.var(id));
        let n = full.numel();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        let coords: Vec<usize> = (0..n).step_by(stride).collect();
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &i in &coords {
            let orig = store.get(id).tensor.data()[i];
            work.get_mut(id).tensor.data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(id).tensor.data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(id).tensor.data_mut()[i] = orig;
            analytic.push(full.data()[i]);
            numeric.push((up - down) / (2.0 * eps));
        }
        let rel_error = relative_error(&analytic, &numeric);
        out.push(GradCheck {
            label: store.get(id).name.clone(),
            analytic: Tensor::row(analytic),
            numeric: Tensor::row(numeric),
            rel_error,
        });
    }
    Ok(out)
}
