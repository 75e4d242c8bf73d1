//! Nonlocal (pairwise-similarity) pooling weights, an ablation baseline.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{fan_in_normal, Bound, ParamId, ParamStore};
use crate::tensor::Scalar;

/// Projections `W_theta`, `W_phi`, both `[d, d]`.
#[derive(Debug, Clone)]
pub struct NlParams {
    pub theta: ParamId,
    pub phi: ParamId,
    pub d: usize,
}

impl NlParams {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, rng: &mut R, prefix: &str, d: usize) -> Self {
        let theta = store.add(format!("{prefix}.theta"), fan_in_normal(rng, [d, d], d));
        let phi = store.add(format!("{prefix}.phi"), fan_in_normal(rng, [d, d], d));
        NlParams { theta, phi, d }
    }

    pub fn param_count(d: usize) -> usize {
        2 * d * d
    }
}

/// Logits `theta(a_i) . phi(x_j)` for anchor features `a: [m, d]` and
/// sources `x: [n, d]`, giving `[m, n]`.
pub fn nl_logits<S: Scalar>(g: &mut Graph<S>, p: &Bound, nl: &NlParams, anchors: Var, x: Var) -> Result<Var> {
    let wt = g.transpose(p[nl.theta])?;
    let wp = g.transpose(p[nl.phi])?;
    let theta = g.matmul(anchors, wt)?;
    let phi = g.matmul(x, wp)?;
    let phi_t = g.transpose(phi)?;
    g.matmul(theta, phi_t)
}

/// Per-anchor weights `w_j(i) = softmax_j(theta(x_i) . phi(x_j))`, `[n, n]`.
pub fn nl_weights<S: Scalar>(g: &mut Graph<S>, p: &Bound, nl: &NlParams, x: Var) -> Result<Var> {
    let logits = nl_logits(g, p, nl, x, x)?;
    g.softmax_rows(logits, None)
}
