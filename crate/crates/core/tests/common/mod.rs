#![allow(dead_code)]

use cpool_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Triple-loop matrix product.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * p + j];
            }
            out[i * p + j] = s;
        }
    }
    out
}

/// Sliding-window 1D cross-correlation, zero padding `pad_left` on the left
/// and `k - 1 - pad_left` on the right.
pub fn naive_conv1d(x: &[f64], n: usize, cin: usize, kern: &[f64], k: usize, cout: usize, bias: &[f64], pad_left: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * cout];
    for t in 0..n {
        for o in 0..cout {
            let mut s = bias[o];
            for u in 0..k {
                let src = t as isize + u as isize - pad_left as isize;
                if src < 0 || src >= n as isize {
                    continue;
                }
                for c in 0..cin {
                    s += x[src as usize * cin + c] * kern[(u * cin + c) * cout + o];
                }
            }
            out[t * cout + o] = s;
        }
    }
    out
}

/// Same-padded 2D cross-correlation.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(x: &[f64], h: usize, w: usize, cin: usize, kern: &[f64], kh: usize, kw: usize, cout: usize, bias: &[f64]) -> Vec<f64> {
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut out = vec![0.0; h * w * cout];
    for i in 0..h {
        for j in 0..w {
            for o in 0..cout {
                let mut s = bias[o];
                for u in 0..kh {
                    for v in 0..kw {
                        let (si, sj) = (i as isize + u as isize - ph as isize, j as isize + v as isize - pw as isize);
                        if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                            continue;
                        }
                        for c in 0..cin {
                            s += x[(si as usize * w + sj as usize) * cin + c] * kern[((u * kw + v) * cin + c) * cout + o];
                        }
                    }
                }
                out[(i * w + j) * cout + o] = s;
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * logistic(x)
}

/// Literal double loop of `y_i = sum_j x_j w_j g^i_j / sum_j w_j g^i_j`,
/// with `g^i_j = exp(-(j - i)^2 / (2 sigma_i^2))` zeroed after `i` when causal.
pub fn naive_pool_1d(x: &[f64], n: usize, d: usize, w: &[f64], sigma: &[f64], causal: bool) -> Vec<f64> {
    let mut y = vec![0.0; n * d];
    for i in 0..n {
        let mut c = 0.0;
        let mut acc = vec![0.0; d];
        for j in 0..n {
            if causal && j > i {
                continue;
            }
            let dist = j as f64 - i as f64;
            let g = (-dist * dist / (2.0 * sigma[i] * sigma[i])).exp();
            c += w[j] * g;
            for k in 0..d {
                acc[k] += x[j * d + k] * w[j] * g;
            }
        }
        for k in 0..d {
            y[i * d + k] = acc[k] / c;
        }
    }
    y
}

/// Quadruple loop of the 2D pooling onto stride-grid centres
/// `(ky*stride + (stride-1)/2, kx*stride + (stride-1)/2)`; `sigma` is per
/// centre.
pub fn naive_pool_2d(x: &[f64], h: usize, w: usize, c: usize, wmap: &[f64], sigma: &[f64], stride: usize) -> Vec<f64> {
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let off = (stride as f64 - 1.0) / 2.0;
    let mut y = vec![0.0; ho * wo * c];
    for ky in 0..ho {
        for kx in 0..wo {
            let k = ky * wo + kx;
            let (cy, cx) = ((ky * stride) as f64 + off, (kx * stride) as f64 + off);
            let mut norm = 0.0;
            let mut acc = vec![0.0; c];
            for i in 0..h {
                for j in 0..w {
                    let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                    let g = (-d2 / (2.0 * sigma[k] * sigma[k])).exp();
                    let wt = wmap[i * w + j] * g;
                    norm += wt;
                    for ch in 0..c {
                        acc[ch] += x[(i * w + j) * c + ch] * wt;
                    }
                }
            }
            for ch in 0..c {
                y[k * c + ch] = acc[ch] / norm;
            }
        }
    }
    y
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}
