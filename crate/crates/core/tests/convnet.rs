mod common;

use common::*;
use cpool_core::contextpool::ContextPoolConfig;
use cpool_core::convnet::*;
use cpool_core::params::ParamStore;
use cpool_core::{Error, Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn pool_avg(x: &Tensor<f64>, region: usize, stride: usize) -> Vec<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = avg_pool(&mut g, xv, region, stride).unwrap();
    g.value(y).to_f64_vec()
}

#[test]
fn avg_pool_examples() {
    assert!(pool_avg(&Tensor::full([4, 4, 2], 3.5), 2, 2).iter().all(|&v| v == 3.5));
    let x = Tensor::from_f64([2, 2, 1], &[1., 2., 3., 4.]).unwrap();
    assert_eq!(pool_avg(&x, 2, 2), vec![2.5]);
}

#[test]
fn avg_pool_matches_naive_oracle() {
    let x = rand_tensor(&mut rng(1), &[4, 4, 3]);
    for (region, stride) in [(2, 2), (3, 1), (2, 1)] {
        let ho = (4 - region) / stride + 1;
        let mut want = vec![0.0; ho * ho * 3];
        for oy in 0..ho {
            for ox in 0..ho {
                for c in 0..3 {
                    let mut s = 0.0;
                    for dy in 0..region {
                        for dx in 0..region {
                            s += x.data()[((oy * stride + dy) * 4 + ox * stride + dx) * 3 + c];
                        }
                    }
                    want[(oy * ho + ox) * 3 + c] = s / (region * region) as f64;
                }
            }
        }
        assert!(max_abs_diff(&pool_avg(&x, region, stride), &want) < 1e-12);
    }
}

fn shapes_config(pooling: PoolingKind) -> ConvNetConfig {
    ConvNetConfig::small((16, 16), 1, 3, pooling)
}

fn logits(net: &ConvNet, store: &ParamStore<f64>, image: &Tensor<f64>) -> Vec<f64> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(image.clone());
    let y = classifier_forward(&mut g, &p, x, net).unwrap();
    g.value(y).to_f64_vec()
}

#[test]
fn every_pooling_kind_gives_class_logits() {
    let image = rand_tensor(&mut rng(2), &[16, 16, 1]);
    for kind in [PoolingKind::Average, PoolingKind::Max, PoolingKind::Contextpool] {
        let (store, net) = ConvNet::new::<f64>(&shapes_config(kind), 3).unwrap();
        assert_eq!(logits(&net, &store, &image).len(), 3);
        assert_eq!(store.count_trainable(), net.config.param_count());
    }
}

#[test]
fn zero_input_and_params_give_zero_logits() {
    for kind in [PoolingKind::Average, PoolingKind::Max, PoolingKind::Contextpool] {
        let (mut store, net) = ConvNet::new::<f64>(&shapes_config(kind), 4).unwrap();
        for e in store.entries_mut() {
            e.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(logits(&net, &store, &Tensor::zeros([16, 16, 1])), vec![0.0; 3]);
    }
}

#[test]
fn conv_stages_are_shared_across_pooling_kinds() {
    let (avg, _) = ConvNet::new::<f64>(&shapes_config(PoolingKind::Average), 5).unwrap();
    let (cp, _) = ConvNet::new::<f64>(&shapes_config(PoolingKind::Contextpool), 5).unwrap();
    for e in avg.entries() {
        assert_eq!(cp.get(cp.find(&e.name).unwrap()), &e.value, "{}", e.name);
    }
    assert!(cp.len() > avg.len());
}

#[test]
fn cp_overhead_is_modest() {
    let c = shapes_config(PoolingKind::Contextpool);
    assert!(c.cp_param_count() * 10 < c.backbone_param_count());
}

/// Straight-line oracle of the classifier with average or ContextPool
/// pooling.
fn naive_classifier(net: &ConvNet, store: &ParamStore<f64>, image: &Tensor<f64>) -> Vec<f64> {
    let cfg = &net.config;
    let get = |id| store.get(id).data().to_vec();
    let (mut h, mut w) = cfg.input_hw;
    let mut c = cfg.in_channels;
    let mut x = image.data().to_vec();
    for (i, stage) in net.stages.iter().enumerate() {
        if i > 0 {
            let s = cfg.stride;
            x = match cfg.pooling {
                PoolingKind::Contextpool => {
                    let pool = &net.pools[i - 1];
                    let pr = &pool.predictor;
                    let hid = pr.hidden;
                    let a: Vec<f64> = naive_conv2d(&x, h, w, c, &get(pr.conv1), 3, 3, hid, &get(pr.bias1)).into_iter().map(silu).collect();
                    let raw = naive_conv2d(&a, h, w, hid, &get(pr.conv2), 3, 3, 2, &get(pr.bias2));
                    let wmap = softmax(&(0..h * w).map(|k| raw[2 * k]).collect::<Vec<_>>());
                    let sig: Vec<f64> = (0..h * w).map(|k| (cfg.cp.r * logistic(raw[2 * k + 1]) * (h + w) as f64 / 2.0).max(0.1)).collect();
                    let (ho, wo) = (h / s, w / s);
                    let centre: Vec<f64> = (0..ho * wo)
                        .map(|k| {
                            let (ky, kx) = (k / wo, k % wo);
                            let mut t = 0.0;
                            for y in ky * s..ky * s + s {
                                for xx in kx * s..kx * s + s {
                                    t += sig[y * w + xx];
                                }
                            }
                            t / (s * s) as f64
                        })
                        .collect();
                    naive_pool_2d(&x, h, w, c, &wmap, &centre, s)
                }
                _ => {
                    let (ho, wo) = (h / s, w / s);
                    let mut out = vec![0.0; ho * wo * c];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            for ch in 0..c {
                                let mut t = 0.0;
                                for dy in 0..s {
                                    for dx in 0..s {
                                        t += x[((oy * s + dy) * w + ox * s + dx) * c + ch];
                                    }
                                }
                                out[(oy * wo + ox) * c + ch] = t / (s * s) as f64;
                            }
                        }
                    }
                    out
                }
            };
            h /= s;
            w /= s;
        }
        for conv in stage {
            let k = get(conv.kernel);
            let cout = store.get(conv.kernel).shape()[3];
            x = naive_conv2d(&x, h, w, c, &k, 3, 3, cout, &get(conv.bias)).into_iter().map(|v| v.max(0.0)).collect();
            c = cout;
        }
    }
    let gap: Vec<f64> = (0..c).map(|ch| (0..h * w).map(|k| x[k * c + ch]).sum::<f64>() / (h * w) as f64).collect();
    let mut out = naive_matmul(&gap, &get(net.head_w), 1, c, cfg.num_classes);
    let b = get(net.head_b);
    out.iter_mut().zip(b).for_each(|(o, b)| *o += b);
    out
}

#[test]
fn classifier_matches_straight_line_oracle() {
    let image = rand_tensor(&mut rng(6), &[16, 16, 1]);
    for kind in [PoolingKind::Average, PoolingKind::Contextpool] {
        let mut config = shapes_config(kind);
        config.cp.size_bias_init = 1.0;
        let (mut store, net) = ConvNet::new::<f64>(&config, 7).unwrap();
        let mut r = rng(8);
        for e in store.entries_mut() {
            if e.name.contains("bias") || e.name.starts_with("pool") {
                e.value.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.3..0.3));
            }
        }
        let got = logits(&net, &store, &image);
        assert!(max_abs_diff(&got, &naive_classifier(&net, &store, &image)) < 1e-10, "{kind:?}");
    }
}

#[test]
fn flop_estimate_matches_counter() {
    let nl = ContextPoolConfig { weighting: cpool_core::contextpool::WeightingMode::Nonlocal, ..ContextPoolConfig::image() };
    for (kind, cp) in [
        (PoolingKind::Average, ContextPoolConfig::image()),
        (PoolingKind::Max, ContextPoolConfig::image()),
        (PoolingKind::Contextpool, ContextPoolConfig::image()),
        (PoolingKind::Contextpool, nl),
    ] {
        let config = ConvNetConfig { cp, ..shapes_config(kind) };
        let (store, net) = ConvNet::new::<f64>(&config, 1).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(rand_tensor(&mut rng(2), &[16, 16, 1]));
        net.classifier_forward(&mut g, &p, x).unwrap();
        let (bb, cpf) = config.flop_estimate();
        assert_eq!(g.flops(), bb + cpf, "{kind:?}");
        assert_eq!(cpf == 0, kind != PoolingKind::Contextpool);
    }
}

#[test]
fn batch_forward_stacks_images() {
    let (store, net) = ConvNet::new::<f64>(&shapes_config(PoolingKind::Max), 9).unwrap();
    let imgs: Vec<Tensor<f64>> = (0..3).map(|k| rand_tensor(&mut rng(10 + k), &[16, 16, 1])).collect();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let y = net.forward_batch(&mut g, &p, &imgs).unwrap();
    assert_eq!(g.shape(y), &[3, 3]);
    assert!(max_abs_diff(&g.value(y).data()[3..6], &logits(&net, &store, &imgs[1])) < 1e-12);
}

#[test]
fn config_checks() {
    let mut c = shapes_config(PoolingKind::Average);
    c.input_hw = (15, 16);
    assert!(matches!(ConvNet::new::<f64>(&c, 0), Err(Error::Config(_))));
    let mut c = shapes_config(PoolingKind::Contextpool);
    c.cp = ContextPoolConfig { causal: true, ..ContextPoolConfig::image() };
    assert!(c.validate().is_err());
    let (store, net) = ConvNet::new::<f64>(&shapes_config(PoolingKind::Average), 0).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(Tensor::zeros([8, 8, 1]));
    assert!(matches!(net.classifier_forward(&mut g, &p, x), Err(Error::Shape { .. })));
    let back: ConvNetConfig = serde_json::from_str(&serde_json::to_string(&shapes_config(PoolingKind::Contextpool)).unwrap()).unwrap();
    assert_eq!(back, shapes_config(PoolingKind::Contextpool));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn cp_pooling_is_convex_per_channel(seed in any::<u64>()) {
        let config = ContextPoolConfig { size_bias_init: 0.5, ..ContextPoolConfig::image() };
        let mut store = ParamStore::<f64>::new();
        let layer = cpool_core::contextpool::ContextPool2d::new(&mut store, &mut rng(seed), "p", 3, (6, 6), 2, &config).unwrap();
        let x = rand_tensor(&mut rng(seed ^ 9), &[6, 6, 3]);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = cpool_core::contextpool::cp_pool_layer(&mut g, &p, xv, &layer).unwrap();
        for (k, &v) in g.value(y).data().iter().enumerate() {
            let c = k % 3;
            let col: Vec<f64> = (0..36).map(|j| x.data()[j * 3 + c]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}
