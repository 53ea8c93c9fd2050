//! Central finite-difference check of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)`.
    pub max_rel_error: f64,
    pub rel_tol: f64,
    pub passed: bool,
}

/// Step and denominator floor used by [`finite_diff_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Gradients smaller than this are compared on an absolute scale.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            floor: 1e-3,
        }
    }
}

/// Compares the gradient of a scalar function at `point` against central
/// differences. `f` receives a fresh graph and the input leaf.
pub fn finite_diff_check<F>(f: F, point: &Tensor, rel_tol: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    finite_diff_check_with(f, point, rel_tol, GradCheckOptions::default())
}

pub fn finite_diff_check_with<F>(
    f: F,
    point: &Tensor,
    rel_tol: f64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let eval = |x: Tensor| -> Result<f64> {
        let g = Graph::new();
        let v = g.constant(x)?;
        let out = f(&g, v)?;
        if !out.value().is_scalar() {
            return Err(Error::NotScalar(out.shape()));
        }
        Ok(out.item())
    };

    let first = eval(point.clone())?;
    let second = eval(point.clone())?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let graph = Graph::new();
    let x = graph.leaf(point.clone())?;
    let out = f(&graph, x)?;
    graph.backward(out)?;
    let analytic = graph
        .grad(x)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += opts.step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= opts.step;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * opts.step));
    }

    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(opts.floor))
        .fold(0.0, f64::max);

    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        rel_tol,
        passed: max_rel_error <= rel_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn square_at_three() {
        let r = finite_diff_check(|_, x| x.mul(x)?.sum(), &Tensor::vector(vec![3.0]), 1e-6)
            .unwrap();
        assert_eq!(r.analytic, vec![6.0]);
        assert!((r.numeric[0] - 6.0).abs() < 1e-6);
        assert!(r.passed);
    }

    #[test]
    fn detects_non_determinism() {
        let calls = Cell::new(0.0);
        let res = finite_diff_check(
            |_, x| {
                calls.set(calls.get() + 1.0);
                x.add_scalar(calls.get())?.sum()
            },
            &Tensor::vector(vec![1.0]),
            1e-4,
        );
        assert!(matches!(res, Err(Error::NonDeterministic { .. })));
    }

    #[test]
    fn flags_wrong_gradient() {
        // detach severs the gradient path, so the analytic gradient is zero
        let r = finite_diff_check(
            |_, x| x.detach()?.square()?.sum(),
            &Tensor::vector(vec![2.0]),
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
    }
}
