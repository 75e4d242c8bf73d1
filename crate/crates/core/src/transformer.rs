//! Pre-norm Transformer language model with optional ContextPool after each
//! block.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::contextpool::{ContextPool1d, ContextPoolConfig, PoolParams, WeightingMode};
use crate::error::{Error, Result};
use crate::params::{fan_in_normal, normal, Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Offset mixed into the seed for ContextPool parameters, so the backbone
/// initialisation does not depend on whether pooling is enabled.
pub const CP_SEED_STREAM: u64 = 0x00C0_FFEE_5EED_0001;

fn default_causal() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Autoregressive masking in attention and pooling.
    #[serde(default = "default_causal")]
    pub causal: bool,
    /// ContextPool settings; absent means the plain Transformer baseline.
    #[serde(default)]
    pub cp: Option<ContextPoolConfig>,
    /// Blocks followed by ContextPool. `None` means every block whose
    /// output feeds another attention block, i.e. all but the last.
    #[serde(default)]
    pub cp_layers: Option<Vec<usize>>,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.ffn_hidden == 0 {
            return fail("layers, d_model, heads and ffn_hidden must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be at least 1".into());
        }
        if let Some(layers) = &self.cp_layers {
            if let Some(bad) = layers.iter().find(|&&l| l >= self.layers) {
                return fail(format!("cp_layers entry {bad} exceeds {} layers", self.layers));
            }
        }
        if let Some(cp) = &self.cp {
            cp.validate()?;
            if (0..self.layers).all(|l| self.cp_for(l).is_none()) {
                return fail("cp is set but no block is followed by ContextPool; list the blocks in cp_layers".into());
            }
        }
        Ok(())
    }

    /// ContextPool settings for block `layer`, with causality forced to match
    /// the model.
    pub fn cp_for(&self, layer: usize) -> Option<ContextPoolConfig> {
        let cp = self.cp.as_ref()?;
        let selected = match &self.cp_layers {
            Some(l) => l.contains(&layer),
            None => layer + 1 < self.layers,
        };
        if !selected {
            return None;
        }
        Some(ContextPoolConfig {
            causal: self.causal,
            ..cp.clone()
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    /// Trainable scalars outside ContextPool.
    pub fn backbone_param_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.ffn_hidden, self.vocab_size);
        let block = 4 * d * d + 2 * d + (d * f + f + f * d + d) + 2 * d;
        v * d + self.layers * block + 2 * d + d * v + v
    }

    /// Trainable scalars in all ContextPool layers.
    pub fn cp_param_count(&self) -> usize {
        (0..self.layers)
            .filter_map(|l| self.cp_for(l))
            .map(|cp| ContextPool1d::param_count(self.d_model, &cp))
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.backbone_param_count() + self.cp_param_count()
    }

    /// Forward matmul/conv FLOPs for `batch` sequences of length `n`,
    /// split into `(backbone, contextpool)`.
    pub fn flop_estimate(&self, batch: usize, n: usize) -> (u64, u64) {
        let (d, f, v, dh) = (self.d_model, self.ffn_hidden, self.vocab_size, self.d_head());
        let rows = (batch * n) as u64;
        let (d, f, v, dh, n64, h) = (d as u64, f as u64, v as u64, dh as u64, n as u64, self.heads as u64);
        let per_seq_attn = h * (2 * n64 * dh * n64 + 2 * n64 * n64 * dh);
        let block = 2 * rows * d * 3 * d + batch as u64 * per_seq_attn + 2 * rows * d * d + 2 * rows * d * f + 2 * rows * f * d;
        let backbone = self.layers as u64 * block + 2 * rows * d * v;
        let cp: u64 = (0..self.layers)
            .filter_map(|l| self.cp_for(l))
            .map(|cp| batch as u64 * cp_flops(&cp, n, self.d_model))
            .sum();
        (backbone, cp)
    }
}

/// Forward matmul/conv FLOPs of one 1D ContextPool call on `[n, d]`.
pub fn cp_flops(cp: &ContextPoolConfig, n: usize, d: usize) -> u64 {
    if n == 1 {
        // the predictor still runs; pooling is skipped
        let (k, h) = (cp.kernel_size as u64, cp.hidden_for(d) as u64);
        return 2 * k * d as u64 * h + 2 * k * h * 2;
    }
    let (n, d64) = (n as u64, d as u64);
    let (k, h) = (cp.kernel_size as u64, cp.hidden_for(d) as u64);
    let predictor = 2 * n * k * d64 * h + 2 * n * k * h * 2;
    let nl = if cp.weighting == WeightingMode::Nonlocal {
        2 * (2 * n * d64 * d64) + 2 * n * d64 * n
    } else {
        0
    };
    predictor + nl + 2 * n * n * d64
}

/// Inverted dropout applied during training.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

/// `x / (1 - rate)` on kept entries, 0 elsewhere. Identity when `rate` is 0.
pub fn dropout<S: Scalar>(g: &mut Graph<S>, x: Var, drop: Option<&mut Dropout<'_>>) -> Result<Var> {
    let Some(drop) = drop else { return Ok(x) };
    if drop.rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - drop.rate;
    let shape = g.shape(x).to_vec();
    let len: usize = shape.iter().product();
    let mask: Vec<S> = (0..len)
        .map(|_| {
            if drop.rng.gen::<f64>() < keep {
                S::from_f64_lossy(1.0 / keep)
            } else {
                S::zero()
            }
        })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

/// Fixed sinusoidal position table `[n, d]`.
pub fn sinusoidal_positions<S: Scalar>(n: usize, d: usize) -> Tensor<S> {
    Tensor::from_fn([n, d], |ix| {
        let (pos, i) = (ix[0] as f64, ix[1]);
        let rate = 10000f64.powf(-((i - i % 2) as f64) / d as f64);
        S::from_f64_lossy(if i % 2 == 0 { (pos * rate).sin() } else { (pos * rate).cos() })
    })
}

/// Softmax of `q . k_j / sqrt(d_head)` for one query `q: [1, dh]` against
/// keys `[n, dh]`. With `causal_limit = Some(t)` keys after `t` get zero.
pub fn attention_scores<S: Scalar>(g: &mut Graph<S>, q: Var, k: Var, causal_limit: Option<usize>) -> Result<Var> {
    let n = g.shape(k)[0];
    let dh = g.shape(k)[1];
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
    let mask: Option<Vec<bool>> = causal_limit.map(|t| (0..n).map(|j| j <= t).collect());
    g.softmax_rows(logits, mask.as_deref())
}

/// `o = sum_i a_i v_i` for rows of `a: [m, n]` and `v: [n, dh]`.
pub fn attend<S: Scalar>(g: &mut Graph<S>, a: Var, v: Var) -> Result<Var> {
    g.matmul(a, v)
}

fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n <= k / n).collect()
}

/// Projections of one multi-head self-attention sublayer and its pre-norm.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    /// `[d, d]`; columns `h*dh..(h+1)*dh` are head `h`'s `W^q`.
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, rng: &mut R, prefix: &str, d: usize, heads: usize) -> Self {
        let mut mat = |name: &str, rng: &mut R| store.add(format!("{prefix}.{name}"), fan_in_normal(rng, [d, d], d));
        let wq = mat("wq", rng);
        let wk = mat("wk", rng);
        let wv = mat("wv", rng);
        let wo = mat("wo", rng);
        let ln_gamma = store.add(format!("{prefix}.ln.gamma"), Tensor::ones([d]));
        let ln_beta = store.add(format!("{prefix}.ln.beta"), Tensor::zeros([d]));
        AttentionParams {
            wq,
            wk,
            wv,
            wo,
            ln_gamma,
            ln_beta,
            heads,
        }
    }
}

/// `x + W^o concat_h(attn_h(LN(x)))` over a stack of sequences.
///
/// `x` is `[batch * seq_len, d]`; attention never crosses sequence
/// boundaries.
pub fn multi_head_self_attention<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound,
    x: Var,
    attn: &AttentionParams,
    seq_len: usize,
    causal: bool,
    drop: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let (rows, d) = match g.shape(x) {
        [r, d] => (*r, *d),
        s => return Err(Error::invalid("multi_head_self_attention", format!("expected [rows, d], got {s:?}"))),
    };
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(Error::invalid("multi_head_self_attention", format!("{rows} rows do not split into length {seq_len}")));
    }
    let dh = d / attn.heads;
    let h = g.layer_norm(x, p[attn.ln_gamma], p[attn.ln_beta])?;
    let q = g.matmul(h, p[attn.wq])?;
    let k = g.matmul(h, p[attn.wk])?;
    let v = g.matmul(h, p[attn.wv])?;
    let mask = causal.then(|| causal_mask(seq_len));
    let scale = 1.0 / (dh as f64).sqrt();
    let mut seqs = Vec::with_capacity(rows / seq_len);
    for b in 0..rows / seq_len {
        let (qb, kb, vb) = (
            g.slice_rows(q, b * seq_len, seq_len)?,
            g.slice_rows(k, b * seq_len, seq_len)?,
            g.slice_rows(v, b * seq_len, seq_len)?,
        );
        let mut heads = Vec::with_capacity(attn.heads);
        for hd in 0..attn.heads {
            let qh = g.slice_cols(qb, hd * dh, dh)?;
            let kh = g.slice_cols(kb, hd * dh, dh)?;
            let vh = g.slice_cols(vb, hd * dh, dh)?;
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let logits = g.scale(logits, scale);
            let a = g.softmax_rows(logits, mask.as_deref())?;
            heads.push(attend(g, a, vh)?);
        }
        seqs.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? });
    }
    let cat = if seqs.len() == 1 { seqs[0] } else { g.concat_rows(&seqs)? };
    let o = g.matmul(cat, p[attn.wo])?;
    let o = dropout(g, o, drop)?;
    g.add(x, o)
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl FeedForward {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, rng: &mut R, prefix: &str, d: usize, hidden: usize) -> Self {
        let w1 = store.add(format!("{prefix}.w1"), fan_in_normal(rng, [d, hidden], d));
        let b1 = store.add(format!("{prefix}.b1"), Tensor::zeros([hidden]));
        let w2 = store.add(format!("{prefix}.w2"), fan_in_normal(rng, [hidden, d], hidden));
        let b2 = store.add(format!("{prefix}.b2"), Tensor::zeros([d]));
        let ln_gamma = store.add(format!("{prefix}.ln.gamma"), Tensor::ones([d]));
        let ln_beta = store.add(format!("{prefix}.ln.beta"), Tensor::zeros([d]));
        FeedForward {
            w1,
            b1,
            w2,
            b2,
            ln_gamma,
            ln_beta,
        }
    }

    /// `x + W2 silu(W1 LN(x) + b1) + b2`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, drop: Option<&mut Dropout<'_>>) -> Result<Var> {
        let h = g.layer_norm(x, p[self.ln_gamma], p[self.ln_beta])?;
        let h = g.matmul(h, p[self.w1])?;
        let h = g.add_row(h, p[self.b1])?;
        let h = g.silu(h);
        let h = g.matmul(h, p[self.w2])?;
        let h = g.add_row(h, p[self.b2])?;
        let h = dropout(g, h, drop)?;
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub attn: AttentionParams,
    pub ffn: FeedForward,
    pub cp: Option<ContextPool1d>,
}

/// One block over `[batch * seq_len, d]`: attention and feed-forward
/// sublayers, then ContextPool per sequence replacing the features in place.
/// Returns the output and each sequence's pooling parameters.
pub fn block_forward<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound,
    x: Var,
    block: &Block,
    seq_len: usize,
    causal: bool,
    mut drop: Option<&mut Dropout<'_>>,
) -> Result<(Var, Vec<PoolParams>)> {
    let h = multi_head_self_attention(g, p, x, &block.attn, seq_len, causal, drop.as_deref_mut())?;
    let h = block.ffn.forward(g, p, h, drop)?;
    let Some(cp) = &block.cp else {
        return Ok((h, Vec::new()));
    };
    let rows = g.shape(h)[0];
    let mut outs = Vec::new();
    let mut pools = Vec::new();
    for b in 0..rows / seq_len {
        let hb = if rows == seq_len { h } else { g.slice_rows(h, b * seq_len, seq_len)? };
        let o = cp.forward(g, p, hb)?;
        outs.push(o.y);
        pools.push(o.params);
    }
    let y = if outs.len() == 1 { outs[0] } else { g.concat_rows(&outs)? };
    Ok((y, pools))
}

/// Character-level language model.
#[derive(Debug, Clone)]
pub struct TransformerLm {
    pub config: TransformerConfig,
    pub embed: ParamId,
    pub blocks: Vec<Block>,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct LmOutput {
    /// `[batch * n, vocab]`, row `b * n + t` for position `t` of sequence `b`.
    pub logits: Var,
    /// `pools[layer][b]`; empty for layers without ContextPool.
    pub pools: Vec<Vec<PoolParams>>,
}

impl TransformerLm {
    /// Builds the model and its parameters. Backbone and ContextPool draw
    /// from independent streams of `seed`.
    pub fn new<S: Scalar>(config: &TransformerConfig, seed: u64) -> Result<(ParamStore<S>, Self)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cp_rng = ChaCha8Rng::seed_from_u64(seed ^ CP_SEED_STREAM);
        let d = config.d_model;
        let embed = store.add("embed", normal(&mut rng, [config.vocab_size, d], 1.0));
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let attn = AttentionParams::new(&mut store, &mut rng, &format!("block{l}.attn"), d, config.heads);
            let ffn = FeedForward::new(&mut store, &mut rng, &format!("block{l}.ffn"), d, config.ffn_hidden);
            let cp = match config.cp_for(l) {
                Some(cp) => Some(ContextPool1d::new(&mut store, &mut cp_rng, &format!("block{l}.cp"), d, config.max_seq_len, &cp)?),
                None => None,
            };
            blocks.push(Block { attn, ffn, cp });
        }
        let ln_gamma = store.add("final_ln.gamma", Tensor::ones([d]));
        let ln_beta = store.add("final_ln.beta", Tensor::zeros([d]));
        let head_w = store.add("head.w", fan_in_normal(&mut rng, [d, config.vocab_size], d));
        let head_b = store.add("head.b", Tensor::zeros([config.vocab_size]));
        Ok((
            store,
            TransformerLm {
                config: config.clone(),
                embed,
                blocks,
                ln_gamma,
                ln_beta,
                head_w,
                head_b,
            },
        ))
    }

    /// Logits for equal-length token sequences.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        seqs: &[&[usize]],
        mut drop: Option<&mut Dropout<'_>>,
    ) -> Result<LmOutput> {
        let n = match seqs.first() {
            Some(s) if !s.is_empty() => s.len(),
            _ => return Err(Error::invalid("lm_forward", "empty batch")),
        };
        if let Some(s) = seqs.iter().find(|s| s.len() != n) {
            return Err(Error::invalid("lm_forward", format!("sequence lengths {n} and {} differ", s.len())));
        }
        if n > self.config.max_seq_len {
            return Err(Error::invalid("lm_forward", format!("length {n} exceeds max_seq_len {}", self.config.max_seq_len)));
        }
        let vocab = self.config.vocab_size;
        let tokens: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        if let Some(&t) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::TargetOutOfRange { target: t, vocab });
        }
        let d = self.config.d_model;
        let emb = g.gather_rows(p[self.embed], &tokens)?;
        let pe = sinusoidal_positions::<S>(n, d);
        let mut pos = Vec::with_capacity(tokens.len() * d);
        for _ in seqs {
            pos.extend_from_slice(pe.data());
        }
        let pos = g.constant(Tensor::new([tokens.len(), d], pos)?);
        let mut x = g.add(emb, pos)?;
        x = dropout(g, x, drop.as_deref_mut())?;
        let mut pools = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, pp) = block_forward(g, p, x, block, n, self.config.causal, drop.as_deref_mut())?;
            x = y;
            pools.push(pp);
        }
        let h = g.layer_norm(x, p[self.ln_gamma], p[self.ln_beta])?;
        let logits = g.matmul(h, p[self.head_w])?;
        let logits = g.add_row(logits, p[self.head_b])?;
        Ok(LmOutput { logits, pools })
    }
}

/// Mean negative log2-likelihood (bits per character) of `targets` under
/// `logits: [n, vocab]`; row `t` is scored against `targets[t]` and `None`
/// rows are skipped.
pub fn lm_loss<S: Scalar>(g: &mut Graph<S>, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    let nats = g.cross_entropy(logits, targets)?;
    Ok(g.scale(nats, std::f64::consts::LOG2_E))
}

/// Splits `tokens` into model inputs and next-token targets:
/// logit `t` predicts `tokens[t + 1]`.
pub fn next_token_targets(tokens: &[usize]) -> (&[usize], Vec<Option<usize>>) {
    let n = tokens.len().saturating_sub(1);
    (&tokens[..n], tokens[1..].iter().map(|&t| Some(t)).collect())
}
