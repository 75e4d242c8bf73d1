//! Adaptive context pooling.
//!
//! Every token (or output pixel) `k` is replaced by a normalized weighted
//! average of the input features,
//!
//! ```text
//! y_k = sum_j x_j * w_j * g^k_j / sum_j w_j * g^k_j
//! ```
//!
//! where `w` are pooling weights predicted for all positions at once by a
//! small two-layer conv net and `g^k` is a Gaussian centred on `k` whose
//! standard deviation is predicted per position. The ablation variants swap
//! either factor for a fixed alternative.

mod config;
mod layer;
mod mask;
mod nonlocal;
mod pool;
mod predictor;

pub use config::{ContextPoolConfig, LocalityMode, WeightingMode};
pub use layer::{apply_variant, cp_pool_layer, ContextPool1d, ContextPool2d, ContextPoolOutput};
pub use mask::{gaussian_mask, Geometry};
pub use nonlocal::{nl_logits, nl_weights, NlParams};
pub use pool::{
    build_locality, context_pool_1d, context_pool_2d, gaussian_log_mask, pool_positions, Locality, PoolWeights,
    DEGENERATE_NORMALIZER,
};
pub use predictor::{
    predict_pool_params, predict_pool_params_2d, PoolParams, PoolTrace, Predictor1d, Predictor2d,
};
