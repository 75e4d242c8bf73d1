//! Central finite-difference gradient checker.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub mod suite;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor of the relative error.
const REL_FLOOR: f64 = 1e-8;

/// Rounding error of a composed `f`, in ulps of its value, that a central
/// difference cannot resolve.
const ROUNDOFF_ULPS: f64 = 64.0;

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x + eps e) - f(x - eps e)) / (2 eps)`.
///
/// Returns the largest `|analytic - numeric| / max(1e-8, |numeric|)` over
/// every coordinate of `x`. A coordinate whose discrepancy is below the
/// resolution of the difference quotient, `64 ulp(|f+| + |f-|) / (2 eps)`,
/// counts as exact: for functions that are constant up to rounding the
/// quotient is pure noise.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    finite_diff_check_all(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

/// Like [`finite_diff_check`], but perturbs every coordinate of several inputs.
pub fn finite_diff_check_all<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite_diff_check", format!("eps must be positive, got {eps}")));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[which])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        for k in 0..input.len() {
            let orig = input.data()[k];
            probe[which].data_mut()[k] = orig + eps;
            let plus = eval(&probe)?;
            probe[which].data_mut()[k] = orig - eps;
            let minus = eval(&probe)?;
            probe[which].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let resolution = ROUNDOFF_ULPS * f64::EPSILON * (plus.abs() + minus.abs()) / (2.0 * eps);
            let diff = (analytic.data()[k] - numeric).abs();
            let err = if diff <= resolution {
                0.0
            } else {
                diff / numeric.abs().max(REL_FLOOR)
            };
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}
