//! Forward builders. Each records one node on the tape.

use std::rc::Rc;

use super::conv::{conv2d_im2col, im2col_1d};
use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

fn matrix_dims(t: &Tensor<impl Scalar>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::invalid(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

impl<S: Scalar> Graph<S> {
    fn unary(&mut self, a: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("shape preserved");
        self.push(value, op, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims(va, "matmul").map_err(|_| Error::shape("matmul", va.shape(), vb.shape()))?;
        let (k2, p) = matrix_dims(vb, "matmul").map_err(|_| Error::shape("matmul", va.shape(), vb.shape()))?;
        if k != k2 {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let value = va.matmul(vb)?;
        self.add_flops(2 * (m * k * p) as u64);
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(a), "transpose")?;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                out.push(src[i * n + j]);
            }
        }
        let value = Tensor::new([n, m], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn broadcast(&mut self, a: Var, v: Var, op: &'static str, along_rows: bool) -> Result<(usize, usize)> {
        let (m, n) = matrix_dims(self.value(a), op)?;
        let want = if along_rows { n } else { m };
        if self.value(v).len() != want {
            return Err(Error::shape(op, self.shape(a), self.shape(v)));
        }
        Ok((m, n))
    }

    /// `out[i, j] = a[i, j] + row[j]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.broadcast(a, row, "add_row", true)?;
        let r = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for (k, o) in value.data_mut().iter_mut().enumerate() {
            *o = *o + r[k % n];
        }
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    /// `out[i, j] = a[i, j] * row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.broadcast(a, row, "mul_row", true)?;
        let r = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for (k, o) in value.data_mut().iter_mut().enumerate() {
            *o = *o * r[k % n];
        }
        Ok(self.push(value, Op::MulRow(a, row), &[a, row]))
    }

    /// `out[i, j] = a[i, j] * col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (_, n) = self.broadcast(a, col, "mul_col", false)?;
        let c = self.value(col).data().to_vec();
        let mut value = self.value(a).clone();
        for (k, o) in value.data_mut().iter_mut().enumerate() {
            *o = *o * c[k / n];
        }
        Ok(self.push(value, Op::MulCol(a, col), &[a, col]))
    }

    /// `out[i, j] = a[i, j] / col[i]`.
    pub fn div_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (_, n) = self.broadcast(a, col, "div_col", false)?;
        let c = self.value(col).data().to_vec();
        let mut value = self.value(a).clone();
        for (k, o) in value.data_mut().iter_mut().enumerate() {
            *o = *o / c[k / n];
        }
        Ok(self.push(value, Op::DivCol(a, col), &[a, col]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = S::from_f64_lossy(factor);
        self.unary(a, Op::Scale(a, f), |x| x * f)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = S::from_f64_lossy(c);
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    /// Logistic sigmoid `1 / (1 + e^-x)`, evaluated without overflow.
    pub fn logistic(&mut self, a: Var) -> Var {
        self.unary(a, Op::Logistic(a), logistic)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > S::zero() { x } else { S::zero() })
    }

    /// `x * logistic(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * logistic(x))
    }

    /// `max(a, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let f = S::from_f64_lossy(floor);
        self.unary(a, Op::ClampMin(a, f), |x| if x >= f { x } else { f })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Row sums of a matrix, shape `[m, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(a), "row_sum")?;
        let d = self.value(a).data();
        let out = (0..m).map(|i| d[i * n..(i + 1) * n].iter().copied().sum()).collect();
        Ok(self.push(Tensor::new([m, 1], out)?, Op::RowSum(a), &[a]))
    }

    /// Column sums of a matrix, shape `[1, n]`.
    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        let (_, n) = matrix_dims(self.value(a), "col_sum")?;
        let mut out = vec![S::zero(); n];
        for (k, &x) in self.value(a).data().iter().enumerate() {
            out[k % n] = out[k % n] + x;
        }
        Ok(self.push(Tensor::new([1, n], out)?, Op::ColSum(a), &[a]))
    }

    /// Row-wise softmax of a matrix with max-subtraction.
    ///
    /// When `mask` is given (row-major, same size as `a`), entries with
    /// `false` are excluded from the row and come out exactly zero; their
    /// input values are never read.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(a), "softmax_rows")?;
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(Error::shape("softmax_rows", &[m, n], &[mask.len()]));
            }
        }
        let src = self.value(a).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let allowed = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
            let row = &src[i * n..(i + 1) * n];
            let mut max = S::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) && x > max {
                    max = x;
                }
            }
            if max == S::neg_infinity() {
                return Err(Error::invalid("softmax_rows", format!("row {i} has no admissible entry")));
            }
            let dst = &mut out[i * n..(i + 1) * n];
            let mut total = S::zero();
            for (j, (o, &x)) in dst.iter_mut().zip(row).enumerate() {
                if allowed(j) {
                    *o = (x - max).exp();
                    total = total + *o;
                }
            }
            let inv = total.recip();
            for o in dst.iter_mut() {
                *o = *o * inv;
            }
        }
        Ok(self.push(Tensor::new([m, n], out)?, Op::SoftmaxRows(a), &[a]))
    }

    /// Softmax along `axis` of a rank-1 or rank-2 tensor.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        match (shape.len(), axis) {
            (1, 0) => {
                let r = self.reshape(a, [1, shape[0]])?;
                let s = self.softmax_rows(r, None)?;
                self.reshape(s, shape)
            }
            (2, 1) => self.softmax_rows(a, None),
            (2, 0) => {
                let t = self.transpose(a)?;
                let s = self.softmax_rows(t, None)?;
                self.transpose(s)
            }
            _ => Err(Error::invalid("softmax", format!("axis {axis} invalid for shape {shape:?}"))),
        }
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Per-row layer normalization with affine `gamma`, `beta` of length `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(x), "layer_norm")?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = S::from_f64_lossy(LAYER_NORM_EPS);
        let nn = S::from_usize(n).expect("usize");
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![S::zero(); m * n];
        let mut rstd = vec![S::zero(); m];
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<S>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nn;
            let r = (var + eps).sqrt().recip();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(table), "gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::invalid("gather_rows", format!("index {bad} out of {m} rows")));
        }
        if indices.is_empty() {
            return Err(Error::invalid("gather_rows", "no indices"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let value = Tensor::new([indices.len(), n], out)?;
        Ok(self.push(value, Op::GatherRows(table, Rc::from(indices)), &[table]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(a), "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::invalid("slice_cols", format!("{start}..{} outside {n} columns", start + len)));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        Ok(self.push(Tensor::new([m, len], out)?, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let (m, _) = matrix_dims(self.value(first), "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = matrix_dims(self.value(p), "concat_cols")?;
            if pm != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let (_, pn) = matrix_dims(self.value(p), "concat_cols")?;
                out.extend_from_slice(&self.value(p).data()[i * pn..(i + 1) * pn]);
            }
        }
        let value = Tensor::new([m, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(a), "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::invalid("slice_rows", format!("{start}..{} outside {m} rows", start + len)));
        }
        let out = self.value(a).data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(Tensor::new([len, n], out)?, Op::SliceRows(a, start), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let (_, n) = matrix_dims(self.value(first), "concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = matrix_dims(self.value(p), "concat_rows")?;
            if pn != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pm;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new([rows, n], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Same-length 1D cross-correlation.
    ///
    /// `x` is `[n, c_in]`, `kernel` is `[k, c_in, c_out]` with odd `k`, `bias`
    /// is `[c_out]`. Padding is `(k-1)/2` zeros on both sides, or `k-1` zeros
    /// on the left when `causal` is set so output `t` only reads `x[..=t]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var, causal: bool) -> Result<Var> {
        let (n, cin) = matrix_dims(self.value(x), "conv1d")?;
        let (ksize, kin, cout) = match self.shape(kernel) {
            [k, ci, co] => (*k, *ci, *co),
            s => return Err(Error::invalid("conv1d", format!("kernel must be [k, c_in, c_out], got {s:?}"))),
        };
        if ksize % 2 == 0 {
            return Err(Error::invalid("conv1d", format!("kernel size {ksize} must be odd")));
        }
        if kin != cin {
            return Err(Error::shape("conv1d", self.shape(x), self.shape(kernel)));
        }
        if self.value(bias).len() != cout {
            return Err(Error::shape("conv1d", self.shape(kernel), self.shape(bias)));
        }
        let pad_left = if causal { ksize - 1 } else { (ksize - 1) / 2 };
        let cols = im2col_1d(self.value(x).data(), n, cin, ksize, pad_left);
        let out = gemm_bias(&cols, n, ksize * cin, self.value(kernel).data(), cout, self.value(bias).data());
        self.add_flops(2 * (n * ksize * cin * cout) as u64);
        let value = Tensor::new([n, cout], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                kernel,
                bias,
                pad_left,
            },
            &[x, kernel, bias],
        ))
    }

    /// Same-padded 2D cross-correlation over `[h, w, c_in]` with kernel
    /// `[kh, kw, c_in, c_out]` (both extents odd) and bias `[c_out]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (h, w, cin) = match self.shape(x) {
            [h, w, c] => (*h, *w, *c),
            s => return Err(Error::invalid("conv2d", format!("input must be [h, w, c], got {s:?}"))),
        };
        let (kh, kw, kin, cout) = match self.shape(kernel) {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => return Err(Error::invalid("conv2d", format!("kernel must be [kh, kw, c_in, c_out], got {s:?}"))),
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel extents {kh}x{kw} must be odd")));
        }
        if kin != cin {
            return Err(Error::shape("conv2d", self.shape(x), self.shape(kernel)));
        }
        if self.value(bias).len() != cout {
            return Err(Error::shape("conv2d", self.shape(kernel), self.shape(bias)));
        }
        let cols = conv2d_im2col(self.value(x).data(), (h, w, cin), (kh, kw));
        let width = kh * kw * cin;
        let out = gemm_bias(&cols, h * w, width, self.value(kernel).data(), cout, self.value(bias).data());
        self.add_flops(2 * (h * w * width * cout) as u64);
        let value = Tensor::new([h, w, cout], out)?;
        Ok(self.push(value, Op::Conv2d { x, kernel, bias }, &[x, kernel, bias]))
    }

    /// Max pooling over `size x size` windows placed every `stride` pixels
    /// (no padding).
    pub fn max_pool2d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let (h, w, c) = match self.shape(x) {
            [h, w, c] => (*h, *w, *c),
            s => return Err(Error::invalid("max_pool2d", format!("input must be [h, w, c], got {s:?}"))),
        };
        if size == 0 || stride == 0 || size > h || size > w {
            return Err(Error::invalid("max_pool2d", format!("window {size} stride {stride} on {h}x{w}")));
        }
        let (ho, wo) = ((h - size) / stride + 1, (w - size) / stride + 1);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(ho * wo * c);
        let mut argmax = Vec::with_capacity(ho * wo * c);
        for oi in 0..ho {
            for oj in 0..wo {
                for ch in 0..c {
                    let mut best = (S::neg_infinity(), 0usize);
                    for u in 0..size {
                        for v in 0..size {
                            let idx = ((oi * stride + u) * w + oj * stride + v) * c + ch;
                            if src[idx] > best.0 {
                                best = (src[idx], idx);
                            }
                        }
                    }
                    out.push(best.0);
                    argmax.push(best.1);
                }
            }
        }
        let value = Tensor::new([ho, wo, c], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Forward value `hard`, gradient routed to `soft` unchanged.
    pub fn straight_through(&mut self, hard: Tensor<S>, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::shape("straight_through", hard.shape(), self.shape(soft)));
        }
        Ok(self.push(hard, Op::StraightThrough(soft), &[soft]))
    }

    /// Mean negative log-likelihood (nats) of `targets` under row-softmax of
    /// `logits`. Rows with `None` targets are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, vocab) = matrix_dims(self.value(logits), "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::TargetOutOfRange { target: t, vocab });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::invalid("cross_entropy", "no valid targets"));
        }
        let src = self.value(logits).data();
        let mut probs = vec![S::zero(); m * vocab];
        let mut total = 0.0f64;
        for i in 0..m {
            let row = &src[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for (p, &x) in probs[i * vocab..(i + 1) * vocab].iter_mut().zip(row) {
                *p = (x - max).exp();
                z = z + *p;
            }
            for p in probs[i * vocab..(i + 1) * vocab].iter_mut() {
                *p = *p / z;
            }
            if let Some(t) = targets[i] {
                total += (z.ln() + max - row[t]).as_f64();
            }
        }
        let value = Tensor::scalar(S::from_f64_lossy(total / count as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: Rc::from(targets),
                probs,
                count,
            },
            &[logits],
        ))
    }
}

pub(crate) fn logistic<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        (S::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn gemm_bias<S: Scalar>(cols: &[S], rows: usize, width: usize, kernel: &[S], cout: usize, bias: &[S]) -> Vec<S> {
    let mut out = Vec::with_capacity(rows * cout);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    S::gemm(
        rows,
        width,
        cout,
        cols,
        (width as isize, 1),
        kernel,
        (cout as isize, 1),
        S::one(),
        &mut out,
        (cout as isize, 1),
    );
    out
}
