mod common;

use common::*;
use cpool_core::contextpool::ContextPoolConfig;
use cpool_core::gradcheck::{finite_diff_check_all, DEFAULT_EPS};
use cpool_core::params::{Bound, ParamStore};
use cpool_core::transformer::*;
use cpool_core::{Error, Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn tiny(cp: Option<ContextPoolConfig>) -> TransformerConfig {
    TransformerConfig {
        layers: 2,
        d_model: 16,
        heads: 2,
        ffn_hidden: 24,
        vocab_size: 11,
        max_seq_len: 12,
        causal: true,
        cp,
        cp_layers: Some(vec![0, 1]),
    }
}

fn cp_active() -> ContextPoolConfig {
    ContextPoolConfig {
        size_bias_init: 1.0,
        ..Default::default()
    }
}

fn randomize_cp(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
    for e in store.entries_mut() {
        if e.trainable && e.name.contains(".cp.") {
            e.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
}

fn logits_of(model: &TransformerLm, store: &ParamStore<f64>, seqs: &[&[usize]]) -> Vec<f64> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let out = model.forward(&mut g, &p, seqs, None).unwrap();
    g.value(out.logits).to_f64_vec()
}

// ---- attention primitives ----

#[test]
fn single_key_gets_all_attention() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(rand_tensor(&mut rng(1), &[1, 4]));
    let k = g.constant(rand_tensor(&mut rng(2), &[1, 4]));
    let a = attention_scores(&mut g, q, k, None).unwrap();
    assert_eq!(g.value(a).data(), &[1.0]);
}

#[test]
fn equal_keys_give_uniform_attention() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(rand_tensor(&mut rng(3), &[1, 3]));
    let k = g.constant(Tensor::from_f64([5, 3], &[0.3, -0.2, 0.9].repeat(5)).unwrap());
    let a = attention_scores(&mut g, q, k, None).unwrap();
    assert!(g.value(a).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn attention_scores_match_direct_oracle() {
    let mut r = rng(4);
    let (q, k) = (rand_tensor(&mut r, &[1, 2]), rand_tensor(&mut r, &[3, 2]));
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
    let a = attention_scores(&mut g, qv, kv, None).unwrap();
    let logits: Vec<f64> = (0..3)
        .map(|j| (q.data()[0] * k.data()[j * 2] + q.data()[1] * k.data()[j * 2 + 1]) / 2f64.sqrt())
        .collect();
    let e: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    let want: Vec<f64> = e.iter().map(|v| v / z).collect();
    assert!(max_abs_diff(g.value(a).data(), &want) < 1e-12);

    let masked = attention_scores(&mut g, qv, kv, Some(0)).unwrap();
    assert_eq!(g.value(masked).data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn attend_examples() {
    let mut r = rng(5);
    let v = rand_tensor(&mut r, &[4, 3]);
    let mut g = Graph::new();
    let vv = g.constant(v.clone());
    let onehot = g.constant(Tensor::from_f64([1, 4], &[0., 0., 1., 0.]).unwrap());
    let o = attend(&mut g, onehot, vv).unwrap();
    assert_eq!(g.value(o).data(), &v.data()[6..9]);

    let same = g.constant(Tensor::from_f64([4, 3], &[0.5, -1.0, 2.0].repeat(4)).unwrap());
    let a = g.constant(Tensor::from_f64([1, 4], &[0.1, 0.2, 0.3, 0.4]).unwrap());
    let o = attend(&mut g, a, same).unwrap();
    assert!(max_abs_diff(g.value(o).data(), &[0.5, -1.0, 2.0]) < 1e-15);

    let a_raw: Vec<f64> = (0..4).map(|_| r.gen_range(0.0..1.0)).collect();
    let z: f64 = a_raw.iter().sum();
    let a_n: Vec<f64> = a_raw.iter().map(|x| x / z).collect();
    let av = g.constant(Tensor::from_f64([1, 4], &a_n).unwrap());
    let o = attend(&mut g, av, vv).unwrap();
    let want: Vec<f64> = (0..3).map(|c| (0..4).map(|i| a_n[i] * v.data()[i * 3 + c]).sum()).collect();
    assert!(max_abs_diff(g.value(o).data(), &want) < 1e-12);
}

// ---- straight-line oracle of the whole model ----

fn layer_norm(x: &[f64], d: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + 1e-5).sqrt();
        for j in 0..d {
            o[j] = (row[j] - mean) * r * gamma[j] + beta[j];
        }
    }
    out
}

fn naive_mhsa(x: &[f64], n: usize, d: usize, heads: usize, w: [&[f64]; 4], ln: [&[f64]; 2], causal: bool) -> Vec<f64> {
    let h = layer_norm(x, d, ln[0], ln[1]);
    let q = naive_matmul(&h, w[0], n, d, d);
    let k = naive_matmul(&h, w[1], n, d, d);
    let v = naive_matmul(&h, w[2], n, d, d);
    let dh = d / heads;
    let mut cat = vec![0.0; n * d];
    for hd in 0..heads {
        for i in 0..n {
            let limit = if causal { i + 1 } else { n };
            let logits: Vec<f64> = (0..limit)
                .map(|j| (0..dh).map(|c| q[i * d + hd * dh + c] * k[j * d + hd * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let a = softmax(&logits);
            for c in 0..dh {
                cat[i * d + hd * dh + c] = (0..limit).map(|j| a[j] * v[j * d + hd * dh + c]).sum();
            }
        }
    }
    let o = naive_matmul(&cat, w[3], n, d, d);
    x.iter().zip(&o).map(|(a, b)| a + b).collect()
}

fn naive_lm(model: &TransformerLm, store: &ParamStore<f64>, tokens: &[usize]) -> Vec<f64> {
    let c = &model.config;
    let (n, d, v) = (tokens.len(), c.d_model, c.vocab_size);
    let get = |id| store.get(id).data().to_vec();
    let embed = get(model.embed);
    let mut x = vec![0.0; n * d];
    for t in 0..n {
        for j in 0..d {
            let rate = 10000f64.powf(-((j - j % 2) as f64) / d as f64);
            let pe = if j % 2 == 0 { (t as f64 * rate).sin() } else { (t as f64 * rate).cos() };
            x[t * d + j] = embed[tokens[t] * d + j] + pe;
        }
    }
    for block in &model.blocks {
        let a = &block.attn;
        let w = [get(a.wq), get(a.wk), get(a.wv), get(a.wo)];
        x = naive_mhsa(&x, n, d, c.heads, [&w[0], &w[1], &w[2], &w[3]], [&get(a.ln_gamma), &get(a.ln_beta)], c.causal);
        let f = &block.ffn;
        let h = layer_norm(&x, d, &get(f.ln_gamma), &get(f.ln_beta));
        let mut h1 = naive_matmul(&h, &get(f.w1), n, d, c.ffn_hidden);
        let b1 = get(f.b1);
        h1.iter_mut().enumerate().for_each(|(k, e)| *e = silu(*e + b1[k % c.ffn_hidden]));
        let h2 = naive_matmul(&h1, &get(f.w2), n, c.ffn_hidden, d);
        let b2 = get(f.b2);
        for k in 0..n * d {
            x[k] += h2[k] + b2[k % d];
        }
        if let Some(cp) = &block.cp {
            let pr = &cp.predictor;
            let (k, hid) = (pr.kernel_size, pr.hidden);
            let pad = if c.causal { k - 1 } else { (k - 1) / 2 };
            let act: Vec<f64> = naive_conv1d(&x, n, d, &get(pr.conv1), k, hid, &get(pr.bias1), pad)
                .into_iter()
                .map(silu)
                .collect();
            let raw = naive_conv1d(&act, n, hid, &get(pr.conv2), k, 2, &get(pr.bias2), pad);
            let wts = softmax(&(0..n).map(|i| raw[2 * i]).collect::<Vec<_>>());
            let sigma: Vec<f64> = (0..n).map(|i| (0.1 * n as f64 * logistic(raw[2 * i + 1])).max(0.1)).collect();
            x = naive_pool_1d(&x, n, d, &wts, &sigma, c.causal);
        }
    }
    let h = layer_norm(&x, d, &get(model.ln_gamma), &get(model.ln_beta));
    let mut logits = naive_matmul(&h, &get(model.head_w), n, d, v);
    let b = get(model.head_b);
    logits.iter_mut().enumerate().for_each(|(k, e)| *e += b[k % v]);
    logits
}

#[test]
fn mhsa_matches_per_query_oracle() {
    let (n, d, heads) = (4, 8, 2);
    for causal in [false, true] {
        let mut store = ParamStore::<f64>::new();
        let attn = AttentionParams::new(&mut store, &mut rng(6), "attn", d, heads);
        for e in store.entries_mut() {
            e.value.data_mut().iter_mut().for_each(|v| *v += 0.1);
        }
        let x = rand_tensor(&mut rng(7), &[n, d]);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = multi_head_self_attention(&mut g, &p, xv, &attn, n, causal, None).unwrap();
        let get = |id| store.get(id).data().to_vec();
        let w = [get(attn.wq), get(attn.wk), get(attn.wv), get(attn.wo)];
        let want = naive_mhsa(x.data(), n, d, heads, [&w[0], &w[1], &w[2], &w[3]], [&get(attn.ln_gamma), &get(attn.ln_beta)], causal);
        assert!(max_abs_diff(g.value(y).data(), &want) < 1e-10);
    }
}

#[test]
fn mhsa_single_token_is_value_path() {
    let d = 6;
    let mut store = ParamStore::<f64>::new();
    let attn = AttentionParams::new(&mut store, &mut rng(8), "attn", d, 3);
    let x = rand_tensor(&mut rng(9), &[1, d]);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = multi_head_self_attention(&mut g, &p, xv, &attn, 1, true, None).unwrap();
    let h = layer_norm(x.data(), d, &[1.0; 6], &[0.0; 6]);
    let hv = naive_matmul(&h, store.get(attn.wv).data(), 1, d, d);
    let o = naive_matmul(&hv, store.get(attn.wo).data(), 1, d, d);
    let want: Vec<f64> = x.data().iter().zip(&o).map(|(a, b)| a + b).collect();
    assert!(max_abs_diff(g.value(y).data(), &want) < 1e-12);
}

#[test]
fn causal_mhsa_row_zero_ignores_later_rows() {
    let (n, d) = (5, 8);
    let mut store = ParamStore::<f64>::new();
    let attn = AttentionParams::new(&mut store, &mut rng(10), "attn", d, 2);
    let x = rand_tensor(&mut rng(11), &[n, d]);
    let mut x2 = x.clone();
    x2.data_mut()[d..].iter_mut().for_each(|v| *v = -*v * 3.0);
    let run = |x: &Tensor<f64>| {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = multi_head_self_attention(&mut g, &p, xv, &attn, n, true, None).unwrap();
        g.value(y).data()[..d].to_vec()
    };
    assert_eq!(run(&x), run(&x2));
}

#[test]
fn baseline_model_matches_straight_line_oracle() {
    let (store, model) = TransformerLm::new::<f64>(&tiny(None), 12).unwrap();
    let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
    let got = logits_of(&model, &store, &[&tokens]);
    assert!(max_abs_diff(&got, &naive_lm(&model, &store, &tokens)) < 1e-10);
}

#[test]
fn cp_model_matches_straight_line_oracle() {
    for causal in [true, false] {
        let config = TransformerConfig {
            causal,
            ..tiny(Some(cp_active()))
        };
        let (mut store, model) = TransformerLm::new::<f64>(&config, 13).unwrap();
        randomize_cp(&mut store, &mut rng(14));
        let tokens = [2, 7, 1, 8, 2, 8, 1, 8, 2, 8];
        let got = logits_of(&model, &store, &[&tokens]);
        assert!(max_abs_diff(&got, &naive_lm(&model, &store, &tokens)) < 1e-10);
    }
}

#[test]
fn batched_forward_equals_per_sequence_forward() {
    let (mut store, model) = TransformerLm::new::<f64>(&tiny(Some(cp_active())), 15).unwrap();
    randomize_cp(&mut store, &mut rng(16));
    let a = [1, 2, 3, 4, 5, 6];
    let b = [6, 5, 4, 3, 2, 1];
    let both = logits_of(&model, &store, &[&a, &b]);
    let v = model.config.vocab_size;
    assert!(max_abs_diff(&both[..6 * v], &logits_of(&model, &store, &[&a])) < 1e-12);
    assert!(max_abs_diff(&both[6 * v..], &logits_of(&model, &store, &[&b])) < 1e-12);
}

#[test]
fn backbone_init_is_shared_with_baseline() {
    let (base, _) = TransformerLm::new::<f64>(&tiny(None), 17).unwrap();
    let (cp, _) = TransformerLm::new::<f64>(&tiny(Some(cp_active())), 17).unwrap();
    for e in base.entries() {
        let id = cp.find(&e.name).unwrap();
        assert_eq!(cp.get(id), &e.value, "{}", e.name);
    }
}

#[test]
fn identity_limit_cp_matches_baseline() {
    let identity = ContextPoolConfig {
        size_bias_init: -60.0,
        ..Default::default()
    };
    let tokens = [4, 4, 0, 10, 3, 7, 7, 1, 9, 2, 5, 6];
    let (base, bm) = TransformerLm::new::<f64>(&tiny(None), 18).unwrap();
    let (cp, cm) = TransformerLm::new::<f64>(&tiny(Some(identity)), 18).unwrap();
    let a = logits_of(&bm, &base, &[&tokens]);
    let b = logits_of(&cm, &cp, &[&tokens]);
    assert!(max_abs_diff(&a, &b) < 1e-5);

    // the same holds block by block
    let mut g = Graph::new();
    let p = cp.bind(&mut g, false);
    let x = g.constant(rand_tensor(&mut rng(19), &[12, 16]));
    let block = &cm.blocks[0];
    let (with_cp, pools) = block_forward(&mut g, &p, x, block, 12, true, None).unwrap();
    let plain = Block { cp: None, ..block.clone() };
    let (without, none) = block_forward(&mut g, &p, x, &plain, 12, true, None).unwrap();
    assert_eq!((pools.len(), none.len()), (1, 0));
    assert!(g.value(with_cp).max_abs_diff(g.value(without)) < 1e-6);
}

#[test]
fn param_counts_match_store() {
    for cp in [None, Some(cp_active())] {
        let config = tiny(cp);
        let (store, _) = TransformerLm::new::<f64>(&config, 0).unwrap();
        assert_eq!(store.count_trainable(), config.param_count());
        assert_eq!(store.count_with_prefix("block0.cp") + store.count_with_prefix("block1.cp"), config.cp_param_count());
    }
    let config = TransformerConfig {
        cp_layers: Some(vec![1]),
        ..tiny(Some(cp_active()))
    };
    let (store, _) = TransformerLm::new::<f64>(&config, 0).unwrap();
    assert_eq!(store.count_with_prefix("block0.cp"), 0);
    assert_eq!(store.count_trainable(), config.param_count());
}

#[test]
fn default_placement_skips_the_last_block() {
    let config = TransformerConfig { layers: 3, cp_layers: None, ..tiny(Some(cp_active())) };
    let (store, model) = TransformerLm::new::<f64>(&config, 0).unwrap();
    let placed: Vec<bool> = model.blocks.iter().map(|b| b.cp.is_some()).collect();
    assert_eq!(placed, [true, true, false]);
    assert_eq!(store.count_with_prefix("block2.cp"), 0);
    let single = TransformerConfig { layers: 1, cp_layers: None, ..tiny(Some(cp_active())) };
    assert!(matches!(single.validate(), Err(Error::Config(_))));
    assert!(TransformerConfig { cp_layers: Some(vec![0]), ..single }.validate().is_ok());
}

#[test]
fn cp_overhead_is_small_at_default_width() {
    let config = TransformerConfig {
        layers: 2,
        d_model: 128,
        heads: 4,
        ffn_hidden: 512,
        vocab_size: 256,
        max_seq_len: 256,
        causal: true,
        cp: Some(ContextPoolConfig::default()),
        cp_layers: None,
    };
    let (k, d, h) = (3, 128, 16);
    assert_eq!(config.cp_param_count(), k * d * h + h + k * h * 2 + 2);
    assert!((config.cp_param_count() as f64) <= 0.05 * config.backbone_param_count() as f64);
}

#[test]
fn flop_estimate_matches_counter() {
    for cp in [None, Some(cp_active())] {
        let config = tiny(cp);
        let (store, model) = TransformerLm::new::<f64>(&config, 1).unwrap();
        let seqs: Vec<Vec<usize>> = (0..3).map(|b| (0..9).map(|t| (b + t) % 11).collect()).collect();
        let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        model.forward(&mut g, &p, &refs, None).unwrap();
        let (bb, cpf) = config.flop_estimate(3, 9);
        assert_eq!(g.flops(), bb + cpf);
        assert_eq!(cpf == 0, config.cp.is_none());
    }
}

#[test]
fn forward_rejects_bad_tokens_and_lengths() {
    let (store, model) = TransformerLm::new::<f64>(&tiny(None), 0).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    assert!(matches!(model.forward(&mut g, &p, &[&[1, 11]], None), Err(Error::TargetOutOfRange { target: 11, .. })));
    assert!(model.forward(&mut g, &p, &[&[1; 13]], None).is_err());
    assert!(model.forward(&mut g, &p, &[&[1, 2], &[1]], None).is_err());
}

#[test]
fn config_validation() {
    let bad = TransformerConfig { heads: 3, ..tiny(None) };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = TransformerConfig { cp_layers: Some(vec![2]), ..tiny(Some(cp_active())) };
    assert!(bad.validate().is_err());
}

// ---- loss ----

fn bpc(logits: &[f64], vocab: usize, targets: &[Option<usize>]) -> Result<f64, Error> {
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::from_f64([targets.len(), vocab], logits)?);
    let loss = lm_loss(&mut g, l, targets)?;
    Ok(g.value(loss).data()[0])
}

#[test]
fn lm_loss_examples() {
    assert!((bpc(&[0.0, 0.0], 2, &[Some(1)]).unwrap() - 1.0).abs() < 1e-15);
    assert!(bpc(&[800.0, 0.0], 2, &[Some(0)]).unwrap().abs() < 1e-15);
    let l = [0.5f64.ln(), 0.5f64.ln(), 0.25f64.ln(), 0.75f64.ln()];
    assert!((bpc(&l, 2, &[Some(0), Some(0)]).unwrap() - 1.5).abs() < 1e-12);
    assert!(matches!(bpc(&[0.0, 0.0], 2, &[Some(2)]), Err(Error::TargetOutOfRange { target: 2, vocab: 2 })));
}

#[test]
fn next_token_alignment() {
    let (inputs, targets) = next_token_targets(&[5, 6, 7, 8]);
    assert_eq!(inputs, &[5, 6, 7]);
    assert_eq!(targets, vec![Some(6), Some(7), Some(8)]);
}

// ---- gradients, dropout, causality ----

#[test]
fn full_model_gradcheck() {
    let config = TransformerConfig {
        layers: 2,
        d_model: 16,
        heads: 2,
        ffn_hidden: 16,
        vocab_size: 7,
        max_seq_len: 8,
        causal: true,
        cp: Some(cp_active()),
        cp_layers: Some(vec![0, 1]),
    };
    let (mut store, model) = TransformerLm::new::<f64>(&config, 20).unwrap();
    randomize_cp(&mut store, &mut rng(21));
    let tokens = [0, 3, 6, 2, 2, 5, 1, 4, 3];
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
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn dropout_is_seeded_and_off_by_default() {
    let (store, model) = TransformerLm::new::<f64>(&tiny(None), 22).unwrap();
    let tokens = [1, 2, 3, 4];
    let run = |seed: Option<u64>| {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let mut r = rng(seed.unwrap_or(0));
        let mut drop = Dropout { rate: 0.2, rng: &mut r };
        let out = model.forward(&mut g, &p, &[&tokens], seed.map(|_| &mut drop)).unwrap();
        g.value(out.logits).to_f64_vec()
    };
    assert_eq!(run(Some(1)), run(Some(1)));
    assert_ne!(run(Some(1)), run(None));
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand_tensor(&mut rng(0), &[3, 3]));
    let mut r = rng(0);
    let y = dropout(&mut g, x, Some(&mut Dropout { rate: 0.0, rng: &mut r })).unwrap();
    assert_eq!(x, y);
}

fn perturb_after(tokens: &[usize], t: usize, vocab: usize, r: &mut impl Rng) -> Vec<usize> {
    let mut out = tokens.to_vec();
    for tok in &mut out[t + 1..] {
        *tok = (*tok + r.gen_range(1..vocab)) % vocab;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn causal_end_to_end(seed in any::<u64>(), n in 2usize..=12, with_cp in any::<bool>()) {
        let config = tiny(with_cp.then(cp_active));
        let (mut store, model) = TransformerLm::new::<f64>(&config, seed).unwrap();
        let mut r = rng(seed);
        randomize_cp(&mut store, &mut r);
        let tokens: Vec<usize> = (0..n).map(|_| r.gen_range(0..11)).collect();
        let t = r.gen_range(0..n - 1);
        let other = perturb_after(&tokens, t, 11, &mut r);
        let a = logits_of(&model, &store, &[&tokens]);
        let b = logits_of(&model, &store, &[&other]);
        prop_assert_eq!(&a[..(t + 1) * 11], &b[..(t + 1) * 11]);
    }
}
