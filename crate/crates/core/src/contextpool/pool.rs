//! Normalized weighted pooling: `y_k = sum_j x_j w_j g^k_j / sum_j w_j g^k_j`.

use super::config::{ContextPoolConfig, LocalityMode};
use super::mask::Geometry;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Normalizers below this magnitude are rejected as degenerate.
pub const DEGENERATE_NORMALIZER: f64 = 1e-12;

/// Source of the pooling weights `w`.
#[derive(Debug, Clone, Copy)]
pub enum PoolWeights {
    /// `w = softmax(logits)` over sources; logits are `[1, sources]`.
    ///
    /// Pooled in log space: the softmax normalizer cancels against `C`, so
    /// each anchor row becomes a masked softmax of `logit_j + log g_j`.
    Softmax(Var),
    /// Per-anchor softmax weights from `[anchors, sources]` logits.
    PerAnchorSoftmax(Var),
    /// Weights used as given, `[1, sources]`.
    Direct(Var),
}

/// Locality prior for one pooling call.
#[derive(Debug, Clone, Default)]
pub struct Locality {
    /// `log g`, `[anchors, sources]`; `None` means `g = 1` on the support.
    pub log_mask: Option<Var>,
    /// Row-major `[anchors, sources]`; `false` entries have `g = 0` exactly.
    pub support: Option<Vec<bool>>,
}

/// Pools `x: [sources, c]` into `[anchors, c]`.
pub fn pool_positions<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    weights: PoolWeights,
    locality: &Locality,
    anchors: usize,
) -> Result<Var> {
    let sources = g.shape(x)[0];
    let support = locality.support.as_deref();
    if let Some(s) = support {
        if s.len() != anchors * sources {
            return Err(Error::shape("pool", &[anchors, sources], &[s.len()]));
        }
    }
    match weights {
        PoolWeights::Softmax(logits) | PoolWeights::PerAnchorSoftmax(logits) => {
            let scores = match (weights, locality.log_mask) {
                (PoolWeights::Softmax(_), Some(lm)) => g.add_row(lm, logits)?,
                (PoolWeights::Softmax(_), None) => {
                    let zeros = g.constant(Tensor::zeros([anchors, sources]));
                    g.add_row(zeros, logits)?
                }
                (_, Some(lm)) => g.add(logits, lm)?,
                (_, None) => logits,
            };
            let a = g.softmax_rows(scores, support)?;
            g.matmul(a, x)
        }
        PoolWeights::Direct(w) => {
            let mask = match (locality.log_mask, support) {
                (Some(lm), None) => g.exp(lm),
                (Some(lm), Some(s)) => {
                    let e = g.exp(lm);
                    let keep = g.constant(indicator(s, anchors, sources));
                    g.mul(e, keep)?
                }
                (None, Some(s)) => g.constant(indicator(s, anchors, sources)),
                (None, None) => g.constant(Tensor::ones([anchors, sources])),
            };
            let a = g.mul_row(mask, w)?;
            let c = g.row_sum(a)?;
            if let Some((anchor, v)) = g
                .value(c)
                .data()
                .iter()
                .enumerate()
                .find(|(_, v)| !(v.abs().as_f64() >= DEGENERATE_NORMALIZER))
            {
                return Err(Error::DegenerateMask {
                    anchor,
                    value: v.as_f64(),
                });
            }
            let num = g.matmul(a, x)?;
            g.div_col(num, c)
        }
    }
}

fn indicator<S: Scalar>(support: &[bool], anchors: usize, sources: usize) -> Tensor<S> {
    let data = support.iter().map(|&b| if b { S::one() } else { S::zero() }).collect();
    Tensor::new([anchors, sources], data).expect("support size checked")
}

/// `log g^k_j = -d2_kj / (2 sigma_k^2)` with distances shifted so each row
/// peaks at 0. `sigma` is `[anchors, 1]`.
pub fn gaussian_log_mask<S: Scalar>(g: &mut Graph<S>, geom: &Geometry, sigma: Var) -> Result<Var> {
    let d2 = Tensor::from_f64([geom.anchors(), geom.sources()], &geom.shifted_dist2())?;
    let d2 = g.constant(d2);
    let sq = g.mul(sigma, sigma)?;
    let two_sq = g.scale(sq, 2.0);
    let ratio = g.div_col(d2, two_sq)?;
    Ok(g.neg(ratio))
}

/// Builds the locality prior selected by `config.locality`.
///
/// `sigma` is per anchor, `[anchors, 1]`. `sparse` supplies the layer-owned
/// support for [`LocalityMode::RandomSparse`].
pub fn build_locality<S: Scalar>(
    g: &mut Graph<S>,
    geom: &Geometry,
    sigma: Var,
    config: &ContextPoolConfig,
    sparse: Option<&[bool]>,
) -> Result<Locality> {
    let sigmas = g.value(sigma).to_f64_vec();
    let mut loc = match config.locality {
        LocalityMode::Gaussian => Locality {
            log_mask: Some(gaussian_log_mask(g, geom, sigma)?),
            support: match config.mask_truncation {
                Some(t) => Some(geom.truncation(&sigmas, t)),
                None => geom.causal_support(),
            },
        },
        LocalityMode::None => Locality {
            log_mask: None,
            support: geom.causal_support(),
        },
        LocalityMode::FixedWindow { width } => Locality {
            log_mask: None,
            support: Some(geom.fixed_window(width)),
        },
        LocalityMode::AdaptiveWindow => {
            let soft = gaussian_log_mask(g, geom, sigma)?;
            let hard = Tensor::zeros([geom.anchors(), geom.sources()]);
            Locality {
                log_mask: Some(g.straight_through(hard, soft)?),
                support: Some(geom.adaptive_window(&sigmas)),
            }
        }
        LocalityMode::RandomSparse { .. } => {
            let s = sparse.ok_or_else(|| {
                Error::invalid("contextpool", "random_sparse locality needs the layer's fixed support")
            })?;
            Locality {
                log_mask: None,
                support: Some(s.to_vec()),
            }
        }
    };
    if let (Some(support), Some(causal)) = (loc.support.as_mut(), geom.causal_support()) {
        support.iter_mut().zip(causal).for_each(|(s, c)| *s &= c);
    }
    Ok(loc)
}

/// ContextPool over a sequence `x: [n, d]` with per-token `sigma: [n, 1]`.
///
/// Output has the same shape as `x`. A single token is returned unchanged.
pub fn context_pool_1d<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    weights: PoolWeights,
    sigma: Var,
    config: &ContextPoolConfig,
    sparse: Option<&[bool]>,
) -> Result<Var> {
    let n = match g.shape(x) {
        [n, _] => *n,
        s => return Err(Error::invalid("context_pool_1d", format!("expected [n, d], got {s:?}"))),
    };
    if g.value(sigma).len() != n {
        return Err(Error::shape("context_pool_1d", g.shape(x), g.shape(sigma)));
    }
    if n == 1 {
        return Ok(x);
    }
    let geom = Geometry::line(n, config.causal);
    let loc = build_locality(g, &geom, sigma, config, sparse)?;
    pool_positions(g, x, weights, &loc, n)
}

/// ContextPool over a feature map `x: [h, w, c]` onto the stride grid.
///
/// `sigma` is per input position, `[h*w, 1]`; each output centre uses the
/// mean of `sigma` over its `stride x stride` input block.
pub fn context_pool_2d<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    weights: PoolWeights,
    sigma: Var,
    stride: usize,
    config: &ContextPoolConfig,
    sparse: Option<&[bool]>,
) -> Result<Var> {
    let (h, w, c) = match g.shape(x) {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::invalid("context_pool_2d", format!("expected [h, w, c], got {s:?}"))),
    };
    if stride == 0 {
        return Err(Error::invalid("context_pool_2d", "stride must be at least 1"));
    }
    if g.value(sigma).len() != h * w {
        return Err(Error::shape("context_pool_2d", g.shape(x), g.shape(sigma)));
    }
    let geom = Geometry::grid(h, w, stride);
    let sigma_anchor = anchor_sigma(g, &geom, sigma, stride)?;
    let loc = build_locality(g, &geom, sigma_anchor, config, sparse)?;
    let flat = g.reshape(x, [h * w, c])?;
    let y = pool_positions(g, flat, weights, &loc, geom.anchors())?;
    let [ho, wo] = geom.out_extent();
    g.reshape(y, [ho, wo, c])
}

pub(crate) fn anchor_sigma<S: Scalar>(g: &mut Graph<S>, geom: &Geometry, sigma: Var, stride: usize) -> Result<Var> {
    if stride == 1 {
        return g.reshape(sigma, [geom.anchors(), 1]);
    }
    let avg = g.constant(Tensor::from_f64([geom.anchors(), geom.sources()], &geom.block_average(stride))?);
    let col = g.reshape(sigma, [geom.sources(), 1])?;
    g.matmul(avg, col)
}
