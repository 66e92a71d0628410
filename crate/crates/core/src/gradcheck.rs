//! Finite-difference verification of graph gradients.
//!
//! The relative error reported throughout is norm-wise:
//! `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`, falling back to the
//! absolute difference when both gradients vanish.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Default central-difference step.
pub const STEP: f64 = 1e-6;

/// A scalar function of several tensors, expressed on a graph.
pub trait GraphFn: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>> {}
impl<F> GraphFn for F where F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>> {}

/// Pins a closure to the higher-ranked [`GraphFn`] signature.
pub fn func<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    f
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub relative_error: f64,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.relative_error.is_finite() && self.relative_error < tolerance
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Evaluates `f` on plain values without tracking gradients.
pub fn evaluate<F: GraphFn>(f: &F, inputs: &[Tensor]) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    Ok(f(&g, &vars)?.value().item())
}

/// Analytic gradients of `f` with respect to every input.
pub fn analytic_gradients<F: GraphFn>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .map(|v| v.grad().expect("backward populates every leaf"))
        .collect())
}

/// Central difference of `f` at element `elem` of input `input`.
pub fn central_difference<F: GraphFn>(
    f: &F,
    inputs: &[Tensor],
    input: usize,
    elem: usize,
    h: f64,
) -> Result<f64> {
    let mut probe = inputs.to_vec();
    let x = probe[input].data()[elem];
    probe[input].data_mut()[elem] = x + h;
    let plus = evaluate(f, &probe)?;
    probe[input].data_mut()[elem] = x - h;
    let minus = evaluate(f, &probe)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Compares analytic and central-difference gradients over every element of
/// every input.
pub fn check<F: GraphFn>(f: &F, inputs: &[Tensor], h: f64) -> Result<GradReport> {
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
        .collect();
    check_at(f, inputs, &coords, h)
}

/// Like [`check`], restricted to the listed `(input, element)` coordinates.
pub fn check_at<F: GraphFn>(
    f: &F,
    inputs: &[Tensor],
    coords: &[(usize, usize)],
    h: f64,
) -> Result<GradReport> {
    let grads = analytic_gradients(f, inputs)?;
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    for &(i, e) in coords {
        analytic.push(grads[i].data()[e]);
        numeric.push(central_difference(f, inputs, i, e, h)?);
    }
    let relative_error = relative_error(&analytic, &numeric);
    Ok(GradReport {
        analytic,
        numeric,
        relative_error,
    })
}
