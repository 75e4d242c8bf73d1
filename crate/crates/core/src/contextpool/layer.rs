//! ContextPool layers owning their predictor, optional nonlocal projections
//! and optional fixed random support.

use rand::Rng;

use super::config::{ContextPoolConfig, LocalityMode, WeightingMode};
use super::mask::Geometry;
use super::nonlocal::{nl_logits, NlParams};
use super::pool::{anchor_sigma, build_locality, pool_positions, PoolWeights};
use super::predictor::{predict_pool_params, predict_pool_params_2d, PoolParams, Predictor1d, Predictor2d};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct ContextPoolOutput {
    pub y: Var,
    pub params: PoolParams,
}

fn support_tensor<S: Scalar>(support: &[bool], rows: usize, cols: usize) -> Tensor<S> {
    let data = support.iter().map(|&b| if b { S::one() } else { S::zero() }).collect();
    Tensor::new([rows, cols], data).expect("support size")
}

fn weights_for<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound,
    mode: WeightingMode,
    params: &PoolParams,
    nl: Option<&NlParams>,
    anchor_feats: Var,
    x: Var,
) -> Result<PoolWeights> {
    let sources = g.shape(x)[0];
    Ok(match mode {
        WeightingMode::Learned => PoolWeights::Softmax(params.w_logits),
        WeightingMode::Unnormalized => PoolWeights::Direct(params.w_logits),
        WeightingMode::Uniform => {
            PoolWeights::Direct(g.constant(Tensor::full([1, sources], S::from_f64_lossy(1.0 / sources as f64))))
        }
        WeightingMode::Nonlocal => {
            let nl = nl.ok_or_else(|| Error::invalid("contextpool", "nonlocal weighting without projections"))?;
            PoolWeights::PerAnchorSoftmax(nl_logits(g, p, nl, anchor_feats, x)?)
        }
    })
}

/// ContextPool over token sequences `[n, d]`, output `[n, d]`.
#[derive(Debug, Clone)]
pub struct ContextPool1d {
    pub config: ContextPoolConfig,
    pub predictor: Predictor1d,
    pub nl: Option<NlParams>,
    pub sparse: Option<ParamId>,
    pub max_len: usize,
}

impl ContextPool1d {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        prefix: &str,
        d: usize,
        max_len: usize,
        config: &ContextPoolConfig,
    ) -> Result<Self> {
        config.validate()?;
        let predictor = Predictor1d::new(store, rng, &format!("{prefix}.pred"), d, config);
        let nl = (config.weighting == WeightingMode::Nonlocal).then(|| NlParams::new(store, rng, &format!("{prefix}.nl"), d));
        let sparse = match config.locality {
            LocalityMode::RandomSparse { keep_fraction } => {
                let geom = Geometry::line(max_len, config.causal);
                let support = geom.random_sparse(keep_fraction, rng);
                Some(store.add_buffer(format!("{prefix}.sparse_support"), support_tensor(&support, max_len, max_len)))
            }
            _ => None,
        };
        Ok(ContextPool1d {
            config: config.clone(),
            predictor,
            nl,
            sparse,
            max_len,
        })
    }

    pub fn param_count(d: usize, config: &ContextPoolConfig) -> usize {
        Predictor1d::param_count(d, config)
            + if config.weighting == WeightingMode::Nonlocal {
                NlParams::param_count(d)
            } else {
                0
            }
    }

    /// Pools `x` according to the configured weighting and locality modes.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<ContextPoolOutput> {
        let n = g.shape(x)[0];
        if n > self.max_len {
            return Err(Error::invalid("contextpool", format!("sequence length {n} exceeds {}", self.max_len)));
        }
        let params = predict_pool_params(g, p, x, &self.predictor, &self.config)?;
        if n == 1 {
            return Ok(ContextPoolOutput { y: x, params });
        }
        let sparse = self.sparse.map(|id| {
            let full = g.value(p[id]).data();
            (0..n * n)
                .map(|k| full[(k / n) * self.max_len + k % n] != S::zero())
                .collect::<Vec<bool>>()
        });
        let geom = Geometry::line(n, self.config.causal);
        let loc = build_locality(g, &geom, params.sigma, &self.config, sparse.as_deref())?;
        let weights = weights_for(g, p, self.config.weighting, &params, self.nl.as_ref(), x, x)?;
        let y = pool_positions(g, x, weights, &loc, n)?;
        Ok(ContextPoolOutput { y, params })
    }
}

/// Applies one ablation variant: the layer's configured weighting and
/// locality modes on `x`.
pub fn apply_variant<S: Scalar>(g: &mut Graph<S>, p: &Bound, x: Var, layer: &ContextPool1d) -> Result<Var> {
    layer.forward(g, p, x).map(|o| o.y)
}

/// ContextPool as a feature-map pooling layer: `[h, w, c]` to
/// `[ceil(h/stride), ceil(w/stride), c]`.
#[derive(Debug, Clone)]
pub struct ContextPool2d {
    pub config: ContextPoolConfig,
    pub predictor: Predictor2d,
    pub nl: Option<NlParams>,
    pub sparse: Option<ParamId>,
    pub input_hw: (usize, usize),
    pub stride: usize,
}

impl ContextPool2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        prefix: &str,
        channels: usize,
        input_hw: (usize, usize),
        stride: usize,
        config: &ContextPoolConfig,
    ) -> Result<Self> {
        config.validate()?;
        if config.causal {
            return Err(Error::Config("causal pooling is only defined for sequences".into()));
        }
        if stride == 0 {
            return Err(Error::Config("pooling stride must be at least 1".into()));
        }
        let predictor = Predictor2d::new(store, rng, &format!("{prefix}.pred"), channels, config);
        let nl = (config.weighting == WeightingMode::Nonlocal)
            .then(|| NlParams::new(store, rng, &format!("{prefix}.nl"), channels));
        let sparse = match config.locality {
            LocalityMode::RandomSparse { keep_fraction } => {
                let geom = Geometry::grid(input_hw.0, input_hw.1, stride);
                let support = geom.random_sparse(keep_fraction, rng);
                let t = support_tensor(&support, geom.anchors(), geom.sources());
                Some(store.add_buffer(format!("{prefix}.sparse_support"), t))
            }
            _ => None,
        };
        Ok(ContextPool2d {
            config: config.clone(),
            predictor,
            nl,
            sparse,
            input_hw,
            stride,
        })
    }

    pub fn param_count(channels: usize, config: &ContextPoolConfig) -> usize {
        Predictor2d::param_count(channels, config)
            + if config.weighting == WeightingMode::Nonlocal {
                NlParams::param_count(channels)
            } else {
                0
            }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<ContextPoolOutput> {
        let (h, w, c) = match g.shape(x) {
            [h, w, c] => (*h, *w, *c),
            s => return Err(Error::invalid("cp_pool_layer", format!("expected [h, w, c], got {s:?}"))),
        };
        if (h, w) != self.input_hw {
            return Err(Error::shape("cp_pool_layer", &[h, w], &[self.input_hw.0, self.input_hw.1]));
        }
        let params = predict_pool_params_2d(g, p, x, &self.predictor, &self.config)?;
        let geom = Geometry::grid(h, w, self.stride);
        let sparse = self.sparse.map(|id| g.value(p[id]).data().iter().map(|&v| v != S::zero()).collect::<Vec<_>>());
        let sigma = anchor_sigma(g, &geom, params.sigma, self.stride)?;
        let loc = build_locality(g, &geom, sigma, &self.config, sparse.as_deref())?;
        let flat = g.reshape(x, [h * w, c])?;
        let anchor_feats = if self.nl.is_some() && self.stride > 1 {
            let avg = g.constant(Tensor::from_f64([geom.anchors(), geom.sources()], &geom.block_average(self.stride))?);
            g.matmul(avg, flat)?
        } else {
            flat
        };
        let weights = weights_for(g, p, self.config.weighting, &params, self.nl.as_ref(), anchor_feats, flat)?;
        let y = pool_positions(g, flat, weights, &loc, geom.anchors())?;
        let [ho, wo] = geom.out_extent();
        let y = g.reshape(y, [ho, wo, c])?;
        Ok(ContextPoolOutput { y, params })
    }
}

/// Convenience wrapper matching the pooling-layer call shape.
pub fn cp_pool_layer<S: Scalar>(g: &mut Graph<S>, p: &Bound, x: Var, layer: &ContextPool2d) -> Result<Var> {
    layer.forward(g, p, x).map(|o| o.y)
}
