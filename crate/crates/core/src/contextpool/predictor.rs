//! The two-layer convolutional predictor `{w, s} = m(X)`.

use rand::Rng;

use super::config::ContextPoolConfig;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_normal, Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Output-layer init scale relative to `1/sqrt(fan_in)`.
const OUTPUT_INIT_GAIN: f64 = 0.1;

/// Graph values describing how each token is pooled.
#[derive(Debug, Clone, Copy)]
pub struct PoolParams {
    /// Raw weight-channel outputs, `[1, n]`.
    pub w_logits: Var,
    /// `softmax(w_logits)` over positions, `[1, n]`.
    pub w: Var,
    /// Normalized sizes in `[0, 1]`, `[n, 1]`.
    pub s: Var,
    /// Gaussian standard deviations, floored, `[n, 1]`.
    pub sigma: Var,
}

/// Plain-value copy of [`PoolParams`] for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolTrace {
    pub w: Vec<f64>,
    pub s: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl PoolParams {
    pub fn trace<S: Scalar>(&self, g: &Graph<S>) -> PoolTrace {
        PoolTrace {
            w: g.value(self.w).to_f64_vec(),
            s: g.value(self.s).to_f64_vec(),
            sigma: g.value(self.sigma).to_f64_vec(),
        }
    }
}

/// `conv(d -> hidden) -> silu -> conv(hidden -> 2)` over a sequence.
#[derive(Debug, Clone)]
pub struct Predictor1d {
    pub conv1: ParamId,
    pub bias1: ParamId,
    pub conv2: ParamId,
    pub bias2: ParamId,
    pub d: usize,
    pub hidden: usize,
    pub kernel_size: usize,
}

impl Predictor1d {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        prefix: &str,
        d: usize,
        config: &ContextPoolConfig,
    ) -> Self {
        let (k, h) = (config.kernel_size, config.hidden_for(d));
        let conv1 = store.add(format!("{prefix}.conv1.kernel"), fan_in_normal(rng, [k, d, h], k * d));
        let bias1 = store.add(format!("{prefix}.conv1.bias"), Tensor::zeros([h]));
        let w2 = fan_in_normal::<S, _>(rng, [k, h, 2], k * h).map(|v| v * S::from_f64_lossy(OUTPUT_INIT_GAIN));
        let conv2 = store.add(format!("{prefix}.conv2.kernel"), w2);
        let b2 = Tensor::from_f64([2], &[0.0, config.size_bias_init]).expect("two channels");
        let bias2 = store.add(format!("{prefix}.conv2.bias"), b2);
        Predictor1d {
            conv1,
            bias1,
            conv2,
            bias2,
            d,
            hidden: h,
            kernel_size: k,
        }
    }

    /// Trainable scalars in one predictor: `k*d*h + h + k*h*2 + 2`.
    pub fn param_count(d: usize, config: &ContextPoolConfig) -> usize {
        let (k, h) = (config.kernel_size, config.hidden_for(d));
        k * d * h + h + k * h * 2 + 2
    }

    /// Zeroes every predictor parameter (uniform `w`, `s = 0.5`).
    pub fn zero<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for id in [self.conv1, self.bias1, self.conv2, self.bias2] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
    }

    /// Raw two-channel output `[n, 2]`. With `causal` both convolutions are
    /// left-padded so row `t` depends only on `x[..=t]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, causal: bool) -> Result<Var> {
        if g.shape(x).get(1) != Some(&self.d) {
            return Err(Error::shape("predict_pool_params", g.shape(x), &[self.kernel_size, self.d, self.hidden]));
        }
        let h = g.conv1d(x, p[self.conv1], p[self.bias1], causal)?;
        let a = g.silu(h);
        g.conv1d(a, p[self.conv2], p[self.bias2], causal)
    }
}

/// Splits the predictor output into `w` (softmax over positions) and `s`
/// (per-token logistic), then maps `s` to `sigma = max(scale * s, floor)`.
pub(crate) fn normalize<S: Scalar>(g: &mut Graph<S>, raw: Var, scale: f64, floor: f64) -> Result<PoolParams> {
    let n = g.shape(raw)[0];
    let l = g.slice_cols(raw, 0, 1)?;
    let w_logits = g.reshape(l, [1, n])?;
    let w = g.softmax_rows(w_logits, None)?;
    let size_logit = g.slice_cols(raw, 1, 1)?;
    let s = g.logistic(size_logit);
    let scaled = g.scale(s, scale);
    let sigma = g.clamp_min(scaled, floor);
    Ok(PoolParams {
        w_logits,
        w,
        s,
        sigma,
    })
}

/// Predicts pooling weights and sizes for a sequence `x: [n, d]`.
pub fn predict_pool_params<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound,
    x: Var,
    predictor: &Predictor1d,
    config: &ContextPoolConfig,
) -> Result<PoolParams> {
    let n = g.shape(x)[0];
    let raw = predictor.forward(g, p, x, config.causal)?;
    normalize(g, raw, config.r * n as f64, config.sigma_floor)
}

/// Same predictor over a feature map, with `k x k` 2D convolutions.
#[derive(Debug, Clone)]
pub struct Predictor2d {
    pub conv1: ParamId,
    pub bias1: ParamId,
    pub conv2: ParamId,
    pub bias2: ParamId,
    pub channels: usize,
    pub hidden: usize,
    pub kernel_size: usize,
}

impl Predictor2d {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        prefix: &str,
        channels: usize,
        config: &ContextPoolConfig,
    ) -> Self {
        let (k, h) = (config.kernel_size, config.hidden_for(channels));
        let fan1 = k * k * channels;
        let conv1 = store.add(format!("{prefix}.conv1.kernel"), fan_in_normal(rng, [k, k, channels, h], fan1));
        let bias1 = store.add(format!("{prefix}.conv1.bias"), Tensor::zeros([h]));
        let w2 = fan_in_normal::<S, _>(rng, [k, k, h, 2], k * k * h).map(|v| v * S::from_f64_lossy(OUTPUT_INIT_GAIN));
        let conv2 = store.add(format!("{prefix}.conv2.kernel"), w2);
        let b2 = Tensor::from_f64([2], &[0.0, config.size_bias_init]).expect("two channels");
        let bias2 = store.add(format!("{prefix}.conv2.bias"), b2);
        Predictor2d {
            conv1,
            bias1,
            conv2,
            bias2,
            channels,
            hidden: h,
            kernel_size: k,
        }
    }

    pub fn param_count(channels: usize, config: &ContextPoolConfig) -> usize {
        let (k, h) = (config.kernel_size, config.hidden_for(channels));
        k * k * channels * h + h + k * k * h * 2 + 2
    }

    pub fn zero<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for id in [self.conv1, self.bias1, self.conv2, self.bias2] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
    }

    /// Raw output `[h, w, 2]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        if g.shape(x).get(2) != Some(&self.channels) {
            return Err(Error::shape("predict_pool_params_2d", g.shape(x), &[self.channels]));
        }
        let h = g.conv2d(x, p[self.conv1], p[self.bias1])?;
        let a = g.silu(h);
        g.conv2d(a, p[self.conv2], p[self.bias2])
    }
}

/// Weight map `W` (softmax over all `h*w` positions jointly) and size map
/// `S` (per-position logistic) with `sigma = max(r * S * (w + h) / 2, floor)`.
/// Vectors are flattened row-major over positions.
pub fn predict_pool_params_2d<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound,
    x: Var,
    predictor: &Predictor2d,
    config: &ContextPoolConfig,
) -> Result<PoolParams> {
    let (h, w) = match g.shape(x) {
        [h, w, _] => (*h, *w),
        s => return Err(Error::invalid("predict_pool_params_2d", format!("expected [h, w, c], got {s:?}"))),
    };
    let raw = predictor.forward(g, p, x)?;
    let flat = g.reshape(raw, [h * w, 2])?;
    normalize(g, flat, config.r * (w + h) as f64 / 2.0, config.sigma_floor)
}
