//! The two trainable model families behind one config type.

use cpool_core::convnet::{ConvNet, ConvNetConfig, PoolingKind};
use cpool_core::params::{Bound, ParamStore};
use cpool_core::transformer::{Dropout, LmOutput, TransformerConfig, TransformerLm};
use cpool_core::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Transformer(TransformerConfig),
    Convnet(ConvNetConfig),
}

/// Forward FLOPs of one example, with the ContextPool share separate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopEstimate {
    pub backbone: u64,
    pub contextpool: u64,
    pub total: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Transformer(c) => c.validate()?,
            ModelConfig::Convnet(c) => c.validate()?,
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        match self {
            ModelConfig::Transformer(c) => c.param_count(),
            ModelConfig::Convnet(c) => c.param_count(),
        }
    }

    pub fn cp_param_count(&self) -> usize {
        match self {
            ModelConfig::Transformer(c) => c.cp_param_count(),
            ModelConfig::Convnet(c) => c.cp_param_count(),
        }
    }

    pub fn has_contextpool(&self) -> bool {
        self.cp_param_count() > 0
    }

    pub fn build<S: Scalar>(&self, seed: u64) -> Result<(ParamStore<S>, Model)> {
        Ok(match self {
            ModelConfig::Transformer(c) => {
                let (store, lm) = TransformerLm::new(c, seed)?;
                (store, Model::Lm(lm))
            }
            ModelConfig::Convnet(c) => {
                let (store, net) = ConvNet::new(c, seed)?;
                (store, Model::Conv(net))
            }
        })
    }
}

/// Analytic forward FLOPs (2 per multiply-accumulate) for one sequence of
/// length `n`, or one image (`n` is ignored for ConvNets).
pub fn flop_estimate(model: &ModelConfig, n: usize) -> FlopEstimate {
    let (backbone, contextpool) = match model {
        ModelConfig::Transformer(c) => c.flop_estimate(1, n),
        ModelConfig::Convnet(c) => c.flop_estimate(),
    };
    FlopEstimate {
        backbone,
        contextpool,
        total: backbone + contextpool,
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Lm(TransformerLm),
    Conv(ConvNet),
}

impl Model {
    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Lm(m) => ModelConfig::Transformer(m.config.clone()),
            Model::Conv(m) => ModelConfig::Convnet(m.config.clone()),
        }
    }

    pub fn lm_forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        seqs: &[&[usize]],
        drop: Option<&mut Dropout<'_>>,
    ) -> Result<LmOutput> {
        match self {
            Model::Lm(m) => Ok(m.forward(g, p, seqs, drop)?),
            Model::Conv(_) => Err(cpool_core::Error::Config("a ConvNet cannot run on token data".into()).into()),
        }
    }

    /// Logits `[batch, classes]` for `[h, w, c]` images.
    pub fn image_forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, images: &[Tensor<S>]) -> Result<Var> {
        match self {
            Model::Conv(m) => Ok(m.forward_batch(g, p, images)?),
            Model::Lm(_) => Err(cpool_core::Error::Config("a Transformer cannot run on image data".into()).into()),
        }
    }
}

/// Copy of `model` with the ContextPool settings replaced; `None` gives the
/// baseline (plain Transformer, or average pooling for a ConvNet).
pub fn with_contextpool(model: &ModelConfig, cp: Option<&cpool_core::contextpool::ContextPoolConfig>) -> ModelConfig {
    match model {
        ModelConfig::Transformer(c) => ModelConfig::Transformer(TransformerConfig {
            cp: cp.cloned(),
            ..c.clone()
        }),
        ModelConfig::Convnet(c) => ModelConfig::Convnet(match cp {
            Some(cp) => ConvNetConfig {
                pooling: PoolingKind::Contextpool,
                cp: cp.clone(),
                ..c.clone()
            },
            None => ConvNetConfig {
                pooling: PoolingKind::Average,
                ..c.clone()
            },
        }),
    }
}
