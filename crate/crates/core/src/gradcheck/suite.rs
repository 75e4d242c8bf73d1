//! Seeded batteries of finite-difference checks: every differentiable op,
//! randomly sized ContextPool layers in 1D and 2D, attention and a small
//! causal language model.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_diff_check_all, DEFAULT_EPS};
use crate::autodiff::{Graph, Var};
use crate::contextpool::{cp_pool_layer, ContextPool1d, ContextPool2d, ContextPoolConfig, WeightingMode};
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;
use crate::transformer::{lm_loss, multi_head_self_attention, next_token_targets, AttentionParams, TransformerConfig, TransformerLm};

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Outcome of one checked function.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_error: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Largest error over `results`, 0 for an empty slice.
pub fn max_error(results: &[CaseResult]) -> f64 {
    results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Module {
    Ops,
    Contextpool,
    Contextpool1d,
    Contextpool2d,
    Attention,
    Transformer,
    All,
}

impl Module {
    pub const NAMES: [&'static str; 7] = ["ops", "contextpool", "contextpool1d", "contextpool2d", "attention", "transformer", "all"];
}

impl FromStr for Module {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "ops" => Module::Ops,
            "contextpool" => Module::Contextpool,
            "contextpool1d" => Module::Contextpool1d,
            "contextpool2d" => Module::Contextpool2d,
            "attention" => Module::Attention,
            "transformer" => Module::Transformer,
            "all" => Module::All,
            _ => return Err(format!("unknown module `{s}`, expected one of {}", Module::NAMES.join(", "))),
        })
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = [
            Module::Ops,
            Module::Contextpool,
            Module::Contextpool1d,
            Module::Contextpool2d,
            Module::Attention,
            Module::Transformer,
            Module::All,
        ]
        .iter()
        .position(|m| m == self)
        .expect("listed");
        f.write_str(Module::NAMES[i])
    }
}

/// Runs `module` with `instances` random instances per randomized family.
pub fn run(module: Module, seed: u64, instances: usize) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    if matches!(module, Module::Ops | Module::All) {
        out.extend(ops(seed)?);
    }
    if matches!(module, Module::Contextpool | Module::Contextpool1d | Module::All) {
        out.extend(contextpool_1d(seed, instances)?);
    }
    if matches!(module, Module::Contextpool | Module::Contextpool2d | Module::All) {
        out.extend(contextpool_2d(seed, instances)?);
    }
    if matches!(module, Module::Attention | Module::All) {
        out.extend(attention(seed, instances)?);
    }
    if matches!(module, Module::Transformer | Module::All) {
        out.push(transformer(seed)?);
    }
    Ok(out)
}

type ScalarFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// A named scalar function and the inputs it is checked at.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: ScalarFn,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut impl Rng, scale: f64) {
    for e in store.entries_mut() {
        if e.trainable {
            e.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
        }
    }
}

/// Sum of `v` weighted by a fixed ramp, so every output coordinate reaches
/// the check with a distinct coefficient.
fn ramp_sum(g: &mut Graph<f64>, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let len: usize = shape.iter().product();
    let ramp: Vec<f64> = (0..len).map(|k| 1.0 + 0.1 * k as f64 / len as f64).collect();
    let ramp = g.constant(Tensor::new(shape, ramp)?);
    let m = g.mul(v, ramp)?;
    Ok(g.sum_all(m))
}

/// One case per differentiable op on `[n, d]`-sized inputs (`n, d >= 3`),
/// each reduced to a scalar through a fixed random projection.
pub fn op_cases(r: &mut impl Rng, n: usize, d: usize) -> Vec<OpCase> {
    let proj = uniform(r, &[n, d], 1.0);
    let reduce = Rc::new(move |g: &mut Graph<f64>, v: Var| -> Result<Var> {
        let shape = g.shape(v).to_vec();
        let numel: usize = shape.iter().product();
        let w: Vec<f64> = (0..numel).map(|k| proj.data()[k % proj.len()] + 0.1 * k as f64).collect();
        let w = g.constant(Tensor::new(shape, w)?);
        let m = g.mul(v, w)?;
        Ok(g.sum_all(m))
    });
    let mut cases = Vec::new();
    let mut case = |name: &'static str, inputs: Vec<Tensor<f64>>, f: Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>| {
        let red = reduce.clone();
        cases.push(OpCase {
            name,
            inputs,
            f: Box::new(move |g, v| {
                let out = f(g, v)?;
                red(g, out)
            }),
        });
    };
    let t = |r: &mut dyn rand::RngCore, shape: &[usize]| uniform(r, shape, 1.0);
    // keep inputs away from the kinks of relu and clamp
    let off_kink = |x: f64, at: f64| if (x - at).abs() < 0.05 { x + 0.1 } else { x };

    case("matmul", vec![t(r, &[n, d]), t(r, &[d, 3])], Box::new(|g, v| g.matmul(v[0], v[1])));
    case("transpose", vec![t(r, &[d, n])], Box::new(|g, v| g.transpose(v[0])));
    case("add", vec![t(r, &[n, d]), t(r, &[n, d])], Box::new(|g, v| g.add(v[0], v[1])));
    case("sub", vec![t(r, &[n, d]), t(r, &[n, d])], Box::new(|g, v| g.sub(v[0], v[1])));
    case("mul", vec![t(r, &[n, d]), t(r, &[n, d])], Box::new(|g, v| g.mul(v[0], v[1])));
    case("add_row", vec![t(r, &[n, d]), t(r, &[d])], Box::new(|g, v| g.add_row(v[0], v[1])));
    case("mul_row", vec![t(r, &[n, d]), t(r, &[1, d])], Box::new(|g, v| g.mul_row(v[0], v[1])));
    case("mul_col", vec![t(r, &[n, d]), t(r, &[n, 1])], Box::new(|g, v| g.mul_col(v[0], v[1])));
    case(
        "div_col",
        vec![t(r, &[n, d]), t(r, &[n, 1]).map(|x| 1.5 + x)],
        Box::new(|g, v| g.div_col(v[0], v[1])),
    );
    case("scale", vec![t(r, &[n, d])], Box::new(|g, v| Ok(g.scale(v[0], -1.7))));
    case("add_scalar", vec![t(r, &[n, d])], Box::new(|g, v| Ok(g.add_scalar(v[0], 0.3))));
    case("exp", vec![t(r, &[n, d])], Box::new(|g, v| Ok(g.exp(v[0]))));
    case("logistic", vec![t(r, &[n, d])], Box::new(|g, v| Ok(g.logistic(v[0]))));
    case("silu", vec![t(r, &[n, d])], Box::new(|g, v| Ok(g.silu(v[0]))));
    case("relu", vec![t(r, &[n, d]).map(|x| off_kink(x, 0.0))], Box::new(|g, v| Ok(g.relu(v[0]))));
    case(
        "clamp_min",
        vec![t(r, &[n, d]).map(|x| off_kink(x, 0.1))],
        Box::new(|g, v| Ok(g.clamp_min(v[0], 0.1))),
    );
    case("sum_all", vec![t(r, &[n, d])], Box::new(|g, v| Ok(g.sum_all(v[0]))));
    case("row_sum", vec![t(r, &[n, d])], Box::new(|g, v| g.row_sum(v[0])));
    case("col_sum", vec![t(r, &[n, d])], Box::new(|g, v| g.col_sum(v[0])));
    case("softmax_rows", vec![t(r, &[n, d])], Box::new(|g, v| g.softmax_rows(v[0], None)));
    case("softmax_axis0", vec![t(r, &[n, d])], Box::new(|g, v| g.softmax(v[0], 0)));
    let mask: Vec<bool> = (0..n * d).map(|k| k % d <= (k / d) % d).collect();
    case("masked_softmax", vec![t(r, &[n, d])], Box::new(move |g, v| g.softmax_rows(v[0], Some(&mask))));
    case("reshape", vec![t(r, &[n, d])], Box::new(move |g, v| g.reshape(v[0], [d, n])));
    case(
        "layer_norm",
        vec![t(r, &[n, d]), t(r, &[d]), t(r, &[d])],
        Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
    );
    let idx: Vec<usize> = (0..n).map(|i| (i * 7 + 1) % 5).collect();
    case("gather_rows", vec![t(r, &[5, d])], Box::new(move |g, v| g.gather_rows(v[0], &idx)));
    case("slice_cols", vec![t(r, &[n, d + 2])], Box::new(move |g, v| g.slice_cols(v[0], 1, d)));
    case(
        "concat_cols",
        vec![t(r, &[n, 2]), t(r, &[n, d - 2])],
        Box::new(|g, v| g.concat_cols(&[v[0], v[1]])),
    );
    case("slice_rows", vec![t(r, &[n + 2, d])], Box::new(move |g, v| g.slice_rows(v[0], 2, n)));
    case(
        "concat_rows",
        vec![t(r, &[1, d]), t(r, &[n - 1, d])],
        Box::new(|g, v| g.concat_rows(&[v[0], v[1]])),
    );
    for causal in [false, true] {
        case(
            if causal { "conv1d_causal" } else { "conv1d" },
            vec![t(r, &[n, 2]), t(r, &[3, 2, d]), t(r, &[d])],
            Box::new(move |g, v| g.conv1d(v[0], v[1], v[2], causal)),
        );
    }
    case(
        "conv2d",
        vec![t(r, &[n, 3, 2]), t(r, &[3, 3, 2, 2]), t(r, &[2])],
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            g.reshape(y, [n, 6])
        }),
    );
    case(
        "max_pool2d",
        vec![t(r, &[4, 4, 2])],
        Box::new(|g, v| {
            let y = g.max_pool2d(v[0], 2, 2)?;
            g.reshape(y, [2, 4])
        }),
    );
    let targets: Vec<Option<usize>> = (0..n).map(|i| if i == 1 { None } else { Some(i % d) }).collect();
    case("cross_entropy", vec![t(r, &[n, d])], Box::new(move |g, v| g.cross_entropy(v[0], &targets)));
    cases
}

/// Every op at three input sizes up to `8 x 8`.
pub fn ops(seed: u64) -> Result<Vec<CaseResult>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (n, d) in [(3, 4), (5, 3), (8, 8)] {
        for c in op_cases(&mut r, n, d) {
            out.push(CaseResult {
                name: format!("{} n={n} d={d}", c.name),
                max_rel_error: finite_diff_check_all(&c.f, &c.inputs, DEFAULT_EPS)?,
            });
        }
    }
    Ok(out)
}

/// `sum(CP(X))` for random `n <= 8`, `d <= 6`, causal or not, checked with
/// respect to X and every predictor tensor.
pub fn contextpool_1d(seed: u64, instances: usize) -> Result<Vec<CaseResult>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x1d);
    (0..instances)
        .map(|i| {
            let n = r.gen_range(2..=8);
            let d = r.gen_range(1..=6);
            let causal = r.gen_bool(0.5);
            let config = ContextPoolConfig {
                causal,
                ..Default::default()
            };
            let mut store = ParamStore::new();
            let layer = ContextPool1d::new(&mut store, &mut r, "cp", d, n, &config)?;
            randomize(&mut store, &mut r, 0.8);
            let mut inputs = vec![uniform(&mut r, &[n, d], 1.0)];
            inputs.extend(store.entries().iter().map(|e| e.value.clone()));
            let err = finite_diff_check_all(
                |g, vars| {
                    let p = Bound::from_vars(vars[1..].to_vec());
                    let y = layer.forward(g, &p, vars[0])?.y;
                    ramp_sum(g, y)
                },
                &inputs,
                DEFAULT_EPS,
            )?;
            Ok(CaseResult {
                name: format!("contextpool1d #{i} n={n} d={d} causal={causal}"),
                max_rel_error: err,
            })
        })
        .collect()
}

/// The 2D pooling layer on random maps up to `6 x 6 x 3`, stride 1 or 2,
/// learned or nonlocal weights.
pub fn contextpool_2d(seed: u64, instances: usize) -> Result<Vec<CaseResult>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x2d);
    (0..instances)
        .map(|i| {
            let stride = r.gen_range(1..=2);
            let h = r.gen_range(2..=6);
            let w = r.gen_range(2..=6);
            let c = r.gen_range(1..=3);
            let weighting = if r.gen_bool(0.25) {
                WeightingMode::Nonlocal
            } else {
                WeightingMode::Learned
            };
            let config = ContextPoolConfig {
                weighting,
                ..ContextPoolConfig::image()
            };
            let mut store = ParamStore::new();
            let layer = ContextPool2d::new(&mut store, &mut r, "pool", c, (h, w), stride, &config)?;
            randomize(&mut store, &mut r, 0.8);
            let mut inputs = vec![uniform(&mut r, &[h, w, c], 1.0)];
            inputs.extend(store.entries().iter().map(|e| e.value.clone()));
            let err = finite_diff_check_all(
                |g, vars| {
                    let p = Bound::from_vars(vars[1..].to_vec());
                    let y = cp_pool_layer(g, &p, vars[0], &layer)?;
                    ramp_sum(g, y)
                },
                &inputs,
                DEFAULT_EPS,
            )?;
            Ok(CaseResult {
                name: format!("contextpool2d #{i} {h}x{w}x{c} stride={stride} {}", config.variant_label()),
                max_rel_error: err,
            })
        })
        .collect()
}

/// Multi-head self-attention on random sequences, causal or not.
pub fn attention(seed: u64, instances: usize) -> Result<Vec<CaseResult>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xa7);
    (0..instances)
        .map(|i| {
            let heads = r.gen_range(1..=2);
            let d = heads * r.gen_range(1..=3);
            let n = r.gen_range(1..=6);
            let causal = r.gen_bool(0.5);
            let mut store = ParamStore::new();
            let attn = AttentionParams::new(&mut store, &mut r, "attn", d, heads);
            randomize(&mut store, &mut r, 0.8);
            let mut inputs = vec![uniform(&mut r, &[n, d], 1.0)];
            inputs.extend(store.entries().iter().map(|e| e.value.clone()));
            let err = finite_diff_check_all(
                |g, vars| {
                    let p = Bound::from_vars(vars[1..].to_vec());
                    let y = multi_head_self_attention(g, &p, vars[0], &attn, n, causal, None)?;
                    ramp_sum(g, y)
                },
                &inputs,
                DEFAULT_EPS,
            )?;
            Ok(CaseResult {
                name: format!("attention #{i} n={n} d={d} heads={heads} causal={causal}"),
                max_rel_error: err,
            })
        })
        .collect()
}

/// Next-token loss of a two-layer causal model with ContextPool after both
/// blocks, with respect to every parameter.
pub fn transformer(seed: u64) -> Result<CaseResult> {
    let config = TransformerConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        ffn_hidden: 8,
        vocab_size: 7,
        max_seq_len: 8,
        causal: true,
        cp: Some(ContextPoolConfig {
            size_bias_init: 1.0,
            ..Default::default()
        }),
        cp_layers: Some(vec![0, 1]),
    };
    let (store, model) = TransformerLm::new::<f64>(&config, seed)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x7f);
    let tokens: Vec<usize> = (0..9).map(|_| r.gen_range(0..config.vocab_size)).collect();
    let (inputs, targets) = next_token_targets(&tokens);
    let values: Vec<Tensor<f64>> = store.entries().iter().map(|e| e.value.clone()).collect();
    let err = finite_diff_check_all(
        |g, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let out = model.forward(g, &p, &[inputs], None)?;
            lm_loss(g, out.logits, &targets)
        },
        &values,
        DEFAULT_EPS,
    )?;
    Ok(CaseResult {
        name: "transformer lm".into(),
        max_rel_error: err,
    })
}
