//! Ready-made configurations for the desk-scale experiments.

use std::path::PathBuf;

use cpool_core::contextpool::ContextPoolConfig;
use cpool_core::convnet::{ConvNetConfig, PoolingKind};
use cpool_core::transformer::TransformerConfig;
use cpool_core::DType;

use crate::data::{DatasetSpec, SHAPE_CLASSES, SHAPE_HW};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Two-layer causal Transformer on the delay-4 copy task.
pub fn copy_task(cp: Option<ContextPoolConfig>) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::Transformer(TransformerConfig {
            layers: 2,
            d_model: 32,
            heads: 2,
            ffn_hidden: 64,
            vocab_size: 16,
            max_seq_len: 32,
            causal: true,
            cp,
            cp_layers: None,
        }),
        dataset: DatasetSpec::Copy {
            vocab: 16,
            delay: 4,
            tokens: 40_000,
            seed: 0,
        },
        base_lr: 3e-3,
        warmup_steps: 100,
        total_steps: 2000,
        batch_size: 8,
        seq_len: 32,
        seed: 0,
        dropout: 0.0,
        weight_decay: 0.01,
        grad_clip: 1.0,
        eval_interval: 500,
        eval_examples: 64,
        dtype: DType::F64,
    }
}

/// Small ConvNet on the 16x16 shapes task.
pub fn shapes(pooling: PoolingKind) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::Convnet(ConvNetConfig::small((SHAPE_HW, SHAPE_HW), 1, SHAPE_CLASSES.len(), pooling)),
        dataset: DatasetSpec::Shapes {
            train: 4000,
            dev: 1000,
            test: 1000,
            noise: 0.5,
            seed: 0,
        },
        base_lr: 3e-3,
        warmup_steps: 50,
        total_steps: 1000,
        batch_size: 16,
        seq_len: 1,
        seed: 0,
        dropout: 0.0,
        weight_decay: 0.01,
        grad_clip: 1.0,
        eval_interval: 0,
        eval_examples: 0,
        dtype: DType::F64,
    }
}

/// Two-layer byte-level LM, d=128, n=256, on `corpus` (synthetic prose when
/// `None`).
pub fn text_lm(cp: Option<ContextPoolConfig>, corpus: Option<PathBuf>) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::Transformer(TransformerConfig {
            layers: 2,
            d_model: 128,
            heads: 4,
            ffn_hidden: 256,
            vocab_size: 256,
            max_seq_len: 256,
            causal: true,
            cp,
            cp_layers: None,
        }),
        dataset: match corpus {
            Some(path) => DatasetSpec::TextFile {
                path,
                max_bytes: crate::data::DEFAULT_TEXT_BYTES,
            },
            None => DatasetSpec::SyntheticText { bytes: 600_000, seed: 0 },
        },
        base_lr: 2e-3,
        warmup_steps: 200,
        total_steps: 5000,
        batch_size: 1,
        seq_len: 256,
        seed: 0,
        dropout: 0.1,
        weight_decay: 0.01,
        grad_clip: 1.0,
        eval_interval: 1000,
        eval_examples: 0,
        dtype: DType::F32,
    }
}
