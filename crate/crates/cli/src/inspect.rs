//! Per-token pooling weights, sizes and masks of a trained language model,
//! and histograms of the sizes for plotting.

use std::fmt::Write as _;

use cpool_core::contextpool::{gaussian_mask, LocalityMode, PoolTrace};
use cpool_core::params::ParamStore;
use cpool_core::transformer::TransformerLm;
use cpool_core::{DType, Graph, Scalar};
use cpool_harness::checkpoint::Checkpoint;
use cpool_harness::Model;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Fixed histogram bins over `[0, 1]`.
pub const STAT_BINS: usize = 20;

/// Tolerance on the sum of a layer's pooling weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDump {
    /// Index of the block this ContextPool follows.
    pub layer: usize,
    pub w: Vec<f64>,
    pub s: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Row `i` is the locality mask of token `i`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskDump {
    /// The input as named on the command line.
    pub input: String,
    pub input_sha256: String,
    pub checkpoint_sha256: String,
    /// Number of tokens the dump covers.
    pub tokens: usize,
    pub layers: Vec<LayerDump>,
}

impl MaskDump {
    /// Checks every layer: matching lengths, weights summing to one, sizes
    /// in `[0, 1]` and an `n x n` mask when present.
    pub fn check(&self) -> Result<(), String> {
        let n = self.tokens;
        for l in &self.layers {
            if l.w.len() != n || l.s.len() != n || l.sigma.len() != n {
                return Err(format!("layer {}: expected {n} entries per field", l.layer));
            }
            let sum: f64 = l.w.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(format!("layer {}: weights sum to {sum}", l.layer));
            }
            if let Some(s) = l.s.iter().find(|s| !(0.0..=1.0).contains(*s)) {
                return Err(format!("layer {}: size {s} outside [0, 1]", l.layer));
            }
            if let Some(g) = &l.g {
                if g.len() != n || g.iter().any(|row| row.len() != n) {
                    return Err(format!("layer {}: mask is not {n} x {n}", l.layer));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub counts: Vec<usize>,
    pub mean_s: f64,
    /// Population standard deviation.
    pub std_s: f64,
}

impl LayerStats {
    fn from_sizes(layer: usize, s: &[f64]) -> Self {
        let mut counts = vec![0; STAT_BINS];
        for &v in s {
            counts[((v * STAT_BINS as f64) as usize).min(STAT_BINS - 1)] += 1;
        }
        let n = s.len().max(1) as f64;
        let mean_s = s.iter().sum::<f64>() / n;
        let var = s.iter().map(|v| (v - mean_s).powi(2)).sum::<f64>() / n;
        LayerStats {
            layer,
            counts,
            mean_s,
            std_s: var.sqrt(),
        }
    }

    pub fn tokens(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Histogram CSV `layer,bin_lo,bin_hi,count`, then a second header and one
/// `layer,mean_s,std_s` summary row per layer.
pub fn stats_csv(stats: &[LayerStats]) -> String {
    let mut out = String::from("layer,bin_lo,bin_hi,count\n");
    for l in stats {
        for (k, c) in l.counts.iter().enumerate() {
            let lo = k as f64 / STAT_BINS as f64;
            let hi = (k + 1) as f64 / STAT_BINS as f64;
            writeln!(out, "{},{lo},{hi},{c}", l.layer).expect("write to String");
        }
    }
    out.push_str("layer,mean_s,std_s\n");
    for l in stats {
        writeln!(out, "{},{},{}", l.layer, l.mean_s, l.std_s).expect("write to String");
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// A restored language model with ContextPool, at either precision.
enum Lm {
    F32(ParamStore<f32>, TransformerLm),
    F64(ParamStore<f64>, TransformerLm),
}

fn restore(ckpt: &Checkpoint) -> CliResult<Lm> {
    fn lm(model: Model) -> CliResult<TransformerLm> {
        match model {
            Model::Lm(m) if m.blocks.iter().any(|b| b.cp.is_some()) => Ok(m),
            Model::Lm(_) => Err(CliError::Config("checkpoint has no ContextPool layer".into())),
            Model::Conv(_) => Err(CliError::Config("inspection needs a transformer checkpoint".into())),
        }
    }
    let bad = |reason: String| CliError::Runtime(format!("checkpoint: {reason}"));
    Ok(match ckpt.manifest.dtype {
        DType::F32 => {
            let (store, model) = ckpt.restore::<f32>().map_err(bad)?;
            Lm::F32(store, lm(model)?)
        }
        DType::F64 => {
            let (store, model) = ckpt.restore::<f64>().map_err(bad)?;
            Lm::F64(store, lm(model)?)
        }
    })
}

/// `(block index, trace)` for every ContextPool layer on one sequence.
fn traces_of<S: Scalar>(store: &ParamStore<S>, model: &TransformerLm, tokens: &[usize]) -> CliResult<Vec<(usize, PoolTrace)>> {
    let mut g = Graph::<S>::new();
    let p = store.bind(&mut g, false);
    let out = model.forward(&mut g, &p, &[tokens], None)?;
    Ok(out
        .pools
        .iter()
        .enumerate()
        .filter_map(|(l, pools)| pools.first().map(|pp| (l, pp.trace(&g))))
        .collect())
}

impl Lm {
    fn model(&self) -> &TransformerLm {
        match self {
            Lm::F32(_, m) | Lm::F64(_, m) => m,
        }
    }

    fn traces(&self, tokens: &[usize]) -> CliResult<Vec<(usize, PoolTrace)>> {
        match self {
            Lm::F32(store, m) => traces_of(store, m, tokens),
            Lm::F64(store, m) => traces_of(store, m, tokens),
        }
    }

    fn tokens(&self, input: &[u8]) -> CliResult<Vec<usize>> {
        let vocab = self.model().config.vocab_size;
        if input.is_empty() {
            return Err(CliError::Runtime("input is empty".into()));
        }
        match input.iter().find(|&&b| b as usize >= vocab) {
            Some(b) => Err(CliError::Runtime(format!("input byte {b} is outside the model vocabulary of {vocab}"))),
            None => Ok(input.iter().map(|&b| b as usize).collect()),
        }
    }
}

/// Pooling weights, sizes and standard deviations of every ContextPool
/// layer on the first `max_seq_len` tokens of `input`. With `full_mask`
/// the Gaussian masks are included too.
pub fn mask_dump(ckpt: &Checkpoint, input_name: &str, input: &[u8], full_mask: bool) -> CliResult<MaskDump> {
    let lm = restore(ckpt)?;
    let mut tokens = lm.tokens(input)?;
    tokens.truncate(lm.model().config.max_seq_len);
    let n = tokens.len();
    let mut layers = Vec::new();
    for (layer, t) in lm.traces(&tokens)? {
        let cp = &lm.model().blocks[layer].cp.as_ref().expect("traced layers have ContextPool").config;
        let g = if full_mask {
            if cp.locality != LocalityMode::Gaussian {
                return Err(CliError::Config(format!("layer {layer} has no Gaussian mask to dump")));
            }
            Some(
                (0..n)
                    .map(|i| gaussian_mask(i, t.sigma[i], n, cp.causal, cp.mask_truncation))
                    .collect(),
            )
        } else {
            None
        };
        layers.push(LayerDump {
            layer,
            w: t.w,
            s: t.s,
            sigma: t.sigma,
            g,
        });
    }
    Ok(MaskDump {
        input: input_name.to_string(),
        input_sha256: sha256_hex(input),
        checkpoint_sha256: ckpt.sha256.clone(),
        tokens: n,
        layers,
    })
}

/// Size histograms over every token of `sample`, read in consecutive
/// windows of the model's maximum length.
pub fn export_pool_stats(ckpt: &Checkpoint, sample: &[u8]) -> CliResult<Vec<LayerStats>> {
    let lm = restore(ckpt)?;
    let tokens = lm.tokens(sample)?;
    let mut sizes: Vec<(usize, Vec<f64>)> = Vec::new();
    for window in tokens.chunks(lm.model().config.max_seq_len) {
        for (k, (layer, t)) in lm.traces(window)?.into_iter().enumerate() {
            if sizes.len() == k {
                sizes.push((layer, Vec::with_capacity(tokens.len())));
            }
            sizes[k].1.extend(t.s);
        }
    }
    Ok(sizes.iter().map(|(layer, s)| LayerStats::from_sizes(*layer, s)).collect())
}
