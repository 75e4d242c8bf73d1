//! Vector-Jacobian products for every op in [`Op`].

use super::conv::{col2im_1d, col2im_2d, conv2d_im2col, im2col_1d};
use super::{Graph, Op, Var};
use crate::tensor::{Scalar, Tensor};

struct Acc<'g, S: Scalar> {
    graph: &'g Graph<S>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Acc<'_, S> {
    fn wants(&self, v: Var) -> bool {
        self.graph.nodes[v.0].requires_grad
    }

    /// Mutable gradient buffer for `v`, zero-initialised on first touch.
    fn slot(&mut self, v: Var) -> &mut Vec<S> {
        let len = self.graph.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
    }

    fn add_with(&mut self, v: Var, f: impl Fn(usize) -> S) {
        if !self.wants(v) {
            return;
        }
        for (k, d) in self.slot(v).iter_mut().enumerate() {
            *d = *d + f(k);
        }
    }
}

pub(super) fn run<S: Scalar>(graph: &Graph<S>, loss: Var) -> Vec<Option<Tensor<S>>> {
    let mut acc = Acc {
        graph,
        grads: vec![None; graph.nodes.len()],
    };
    acc.grads[loss.0] = Some(vec![S::one()]);
    let mut leaves: Vec<Option<Tensor<S>>> = vec![None; graph.nodes.len()];

    for id in (0..=loss.0).rev() {
        let node = &graph.nodes[id];
        if !node.requires_grad {
            continue;
        }
        let Some(g) = acc.grads[id].take() else {
            continue;
        };
        if let Op::Leaf = node.op {
            leaves[id] = Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"));
            continue;
        }
        step(&mut acc, id, &g);
    }
    leaves
}

fn dims(t: &Tensor<impl Scalar>) -> (usize, usize) {
    t.dims2()
}

fn step<S: Scalar>(acc: &mut Acc<'_, S>, id: usize, g: &[S]) {
    let graph = acc.graph;
    let node = &graph.nodes[id];
    let out = node.value.data();
    let val = |v: Var| graph.nodes[v.0].value.data();

    match &node.op {
        Op::Leaf => unreachable!("leaves handled by caller"),
        Op::MatMul(a, b) => {
            let (m, k) = dims(graph.value(*a));
            let (_, p) = dims(graph.value(*b));
            if acc.wants(*a) {
                let bv = val(*b);
                let da = acc.slot(*a);
                // da += g @ b^T
                S::gemm(m, p, k, g, (p as isize, 1), bv, (1, p as isize), S::one(), da, (k as isize, 1));
            }
            if acc.wants(*b) {
                let av = val(*a);
                let db = acc.slot(*b);
                // db += a^T @ g
                S::gemm(k, m, p, av, (1, k as isize), g, (p as isize, 1), S::one(), db, (p as isize, 1));
            }
        }
        Op::Transpose(a) => {
            let (m, n) = dims(graph.value(*a));
            // out is [n, m]
            acc.add_with(*a, |k| {
                let (i, j) = (k / n, k % n);
                g[j * m + i]
            });
        }
        Op::Add(a, b) => {
            acc.add_with(*a, |k| g[k]);
            acc.add_with(*b, |k| g[k]);
        }
        Op::Sub(a, b) => {
            acc.add_with(*a, |k| g[k]);
            acc.add_with(*b, |k| -g[k]);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc.add_with(*a, |k| g[k] * bv[k]);
            acc.add_with(*b, |k| g[k] * av[k]);
        }
        Op::AddRow(a, r) => {
            let (_, n) = dims(graph.value(*a));
            acc.add_with(*a, |k| g[k]);
            if acc.wants(*r) {
                let dr = acc.slot(*r);
                for (k, &gk) in g.iter().enumerate() {
                    dr[k % n] = dr[k % n] + gk;
                }
            }
        }
        Op::MulRow(a, r) => {
            let (_, n) = dims(graph.value(*a));
            let (av, rv) = (val(*a), val(*r));
            acc.add_with(*a, |k| g[k] * rv[k % n]);
            if acc.wants(*r) {
                let dr = acc.slot(*r);
                for (k, &gk) in g.iter().enumerate() {
                    dr[k % n] = dr[k % n] + gk * av[k];
                }
            }
        }
        Op::MulCol(a, c) => {
            let (_, n) = dims(graph.value(*a));
            let (av, cv) = (val(*a), val(*c));
            acc.add_with(*a, |k| g[k] * cv[k / n]);
            if acc.wants(*c) {
                let dc = acc.slot(*c);
                for (k, &gk) in g.iter().enumerate() {
                    dc[k / n] = dc[k / n] + gk * av[k];
                }
            }
        }
        Op::DivCol(a, c) => {
            let (_, n) = dims(graph.value(*a));
            let cv = val(*c);
            acc.add_with(*a, |k| g[k] / cv[k / n]);
            if acc.wants(*c) {
                let dc = acc.slot(*c);
                for (k, &gk) in g.iter().enumerate() {
                    dc[k / n] = dc[k / n] - gk * out[k] / cv[k / n];
                }
            }
        }
        Op::Scale(a, f) => acc.add_with(*a, |k| g[k] * *f),
        Op::AddScalar(a) | Op::Reshape(a) | Op::StraightThrough(a) => acc.add_with(*a, |k| g[k]),
        Op::Exp(a) => acc.add_with(*a, |k| g[k] * out[k]),
        Op::Logistic(a) => acc.add_with(*a, |k| g[k] * out[k] * (S::one() - out[k])),
        Op::Relu(a) => {
            let av = val(*a);
            acc.add_with(*a, |k| if av[k] > S::zero() { g[k] } else { S::zero() });
        }
        Op::Silu(a) => {
            let av = val(*a);
            acc.add_with(*a, |k| {
                let s = super::ops::logistic(av[k]);
                g[k] * (s + av[k] * s * (S::one() - s))
            });
        }
        Op::ClampMin(a, floor) => {
            let av = val(*a);
            acc.add_with(*a, |k| if av[k] >= *floor { g[k] } else { S::zero() });
        }
        Op::SumAll(a) => acc.add_with(*a, |_| g[0]),
        Op::RowSum(a) => {
            let (_, n) = dims(graph.value(*a));
            acc.add_with(*a, |k| g[k / n]);
        }
        Op::ColSum(a) => {
            let (_, n) = dims(graph.value(*a));
            acc.add_with(*a, |k| g[k % n]);
        }
        Op::SoftmaxRows(a) => {
            let (m, n) = dims(&node.value);
            let mut dots = vec![S::zero(); m];
            for (i, d) in dots.iter_mut().enumerate() {
                *d = (0..n).map(|j| g[i * n + j] * out[i * n + j]).sum();
            }
            acc.add_with(*a, |k| out[k] * (g[k] - dots[k / n]));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let (m, n) = dims(graph.value(*x));
            let gv = val(*gamma);
            if acc.wants(*gamma) {
                let dg = acc.slot(*gamma);
                for k in 0..m * n {
                    dg[k % n] = dg[k % n] + g[k] * xhat[k];
                }
            }
            if acc.wants(*beta) {
                let db = acc.slot(*beta);
                for k in 0..m * n {
                    db[k % n] = db[k % n] + g[k];
                }
            }
            if acc.wants(*x) {
                let nn = S::from_usize(n).expect("usize");
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    let row = i * n..(i + 1) * n;
                    let mut mean_d = S::zero();
                    let mut mean_dx = S::zero();
                    for k in row.clone() {
                        let d = g[k] * gv[k % n];
                        mean_d = mean_d + d;
                        mean_dx = mean_dx + d * xhat[k];
                    }
                    mean_d = mean_d / nn;
                    mean_dx = mean_dx / nn;
                    for k in row {
                        let d = g[k] * gv[k % n];
                        dx[k] = rstd[i] * (d - mean_d - xhat[k] * mean_dx);
                    }
                }
                acc.add_with(*x, |k| dx[k]);
            }
        }
        Op::GatherRows(table, idx) => {
            if acc.wants(*table) {
                let (_, n) = dims(graph.value(*table));
                let dt = acc.slot(*table);
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        dt[src * n + j] = dt[src * n + j] + g[r * n + j];
                    }
                }
            }
        }
        Op::SliceCols(a, start) => {
            if acc.wants(*a) {
                let (_, n) = dims(graph.value(*a));
                let (m, len) = dims(&node.value);
                let da = acc.slot(*a);
                for i in 0..m {
                    for j in 0..len {
                        da[i * n + start + j] = da[i * n + start + j] + g[i * len + j];
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let (m, total) = dims(&node.value);
            let mut offset = 0;
            for p in parts {
                let (_, pn) = dims(graph.value(*p));
                let off = offset;
                acc.add_with(*p, |k| g[(k / pn) * total + off + k % pn]);
                offset += pn;
            }
            debug_assert!(m > 0);
        }
        Op::SliceRows(a, start) => {
            let (_, n) = dims(graph.value(*a));
            let len = g.len();
            if acc.wants(*a) {
                let da = acc.slot(*a);
                for k in 0..len {
                    da[start * n + k] = da[start * n + k] + g[k];
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = graph.value(*p).len();
                let off = offset;
                acc.add_with(*p, |k| g[off + k]);
                offset += len;
            }
        }
        Op::Conv1d {
            x,
            kernel,
            bias,
            pad_left,
        } => {
            let (n, cin) = dims(graph.value(*x));
            let kshape = graph.shape(*kernel);
            let (ksize, cout) = (kshape[0], kshape[2]);
            let width = ksize * cin;
            if acc.wants(*bias) {
                let db = acc.slot(*bias);
                for (k, &gk) in g.iter().enumerate() {
                    db[k % cout] = db[k % cout] + gk;
                }
            }
            if acc.wants(*kernel) {
                let cols = im2col_1d(val(*x), n, cin, ksize, *pad_left);
                let dk = acc.slot(*kernel);
                S::gemm(width, n, cout, &cols, (1, width as isize), g, (cout as isize, 1), S::one(), dk, (cout as isize, 1));
            }
            if acc.wants(*x) {
                let kv = val(*kernel);
                let mut dcols = vec![S::zero(); n * width];
                S::gemm(n, cout, width, g, (cout as isize, 1), kv, (1, cout as isize), S::zero(), &mut dcols, (width as isize, 1));
                let dx = acc.slot(*x);
                col2im_1d(&dcols, dx, n, cin, ksize, *pad_left);
            }
        }
        Op::Conv2d { x, kernel, bias } => {
            let xs = graph.shape(*x);
            let (h, w, cin) = (xs[0], xs[1], xs[2]);
            let ks = graph.shape(*kernel);
            let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
            let width = kh * kw * cin;
            let rows = h * w;
            if acc.wants(*bias) {
                let db = acc.slot(*bias);
                for (k, &gk) in g.iter().enumerate() {
                    db[k % cout] = db[k % cout] + gk;
                }
            }
            if acc.wants(*kernel) {
                let cols = conv2d_im2col(val(*x), (h, w, cin), (kh, kw));
                let dk = acc.slot(*kernel);
                S::gemm(width, rows, cout, &cols, (1, width as isize), g, (cout as isize, 1), S::one(), dk, (cout as isize, 1));
            }
            if acc.wants(*x) {
                let kv = val(*kernel);
                let mut dcols = vec![S::zero(); rows * width];
                S::gemm(rows, cout, width, g, (cout as isize, 1), kv, (1, cout as isize), S::zero(), &mut dcols, (width as isize, 1));
                let dx = acc.slot(*x);
                col2im_2d(&dcols, dx, (h, w, cin), (kh, kw));
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if acc.wants(*x) {
                let dx = acc.slot(*x);
                for (&src, &gk) in argmax.iter().zip(g) {
                    dx[src] = dx[src] + gk;
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            let (_, vocab) = dims(graph.value(*logits));
            let scale = g[0] / S::from_usize(*count).expect("usize");
            acc.add_with(*logits, |k| {
                let (i, j) = (k / vocab, k % vocab);
                match targets[i] {
                    None => S::zero(),
                    Some(t) if t == j => (probs[k] - S::one()) * scale,
                    Some(_) => probs[k] * scale,
                }
            });
        }
    }
}
