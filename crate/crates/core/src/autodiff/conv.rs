//! im2col lowering shared by the conv ops.

use crate::tensor::Scalar;

/// `cols[t, u*cin + c] = x[t + u - pad_left, c]`, zero outside `[0, n)`.
pub(crate) fn im2col_1d<S: Scalar>(
    x: &[S],
    n: usize,
    cin: usize,
    ksize: usize,
    pad_left: usize,
) -> Vec<S> {
    let width = ksize * cin;
    let mut cols = vec![S::zero(); n * width];
    for t in 0..n {
        for u in 0..ksize {
            let src = t as isize + u as isize - pad_left as isize;
            if src < 0 || src >= n as isize {
                continue;
            }
            let src = src as usize;
            let dst = t * width + u * cin;
            cols[dst..dst + cin].copy_from_slice(&x[src * cin..(src + 1) * cin]);
        }
    }
    cols
}

pub(crate) fn col2im_1d<S: Scalar>(
    dcols: &[S],
    dx: &mut [S],
    n: usize,
    cin: usize,
    ksize: usize,
    pad_left: usize,
) {
    let width = ksize * cin;
    for t in 0..n {
        for u in 0..ksize {
            let src = t as isize + u as isize - pad_left as isize;
            if src < 0 || src >= n as isize {
                continue;
            }
            let src = src as usize;
            let row = &dcols[t * width + u * cin..t * width + (u + 1) * cin];
            for (d, &g) in dx[src * cin..(src + 1) * cin].iter_mut().zip(row) {
                *d = *d + g;
            }
        }
    }
}

/// Same-padded 2D im2col over an `h x w x cin` map with a `kh x kw` window.
pub fn conv2d_im2col<S: Scalar>(
    x: &[S],
    (h, w, cin): (usize, usize, usize),
    (kh, kw): (usize, usize),
) -> Vec<S> {
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let width = kh * kw * cin;
    let mut cols = vec![S::zero(); h * w * width];
    for i in 0..h {
        for j in 0..w {
            let row = (i * w + j) * width;
            for u in 0..kh {
                let si = i as isize + u as isize - ph as isize;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for v in 0..kw {
                    let sj = j as isize + v as isize - pw as isize;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let src = (si as usize * w + sj as usize) * cin;
                    let dst = row + (u * kw + v) * cin;
                    cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im_2d<S: Scalar>(
    dcols: &[S],
    dx: &mut [S],
    (h, w, cin): (usize, usize, usize),
    (kh, kw): (usize, usize),
) {
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let width = kh * kw * cin;
    for i in 0..h {
        for j in 0..w {
            let row = (i * w + j) * width;
            for u in 0..kh {
                let si = i as isize + u as isize - ph as isize;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for v in 0..kw {
                    let sj = j as isize + v as isize - pw as isize;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let src = (si as usize * w + sj as usize) * cin;
                    let off = row + (u * kw + v) * cin;
                    for c in 0..cin {
                        dx[src + c] = dx[src + c] + dcols[off + c];
                    }
                }
            }
        }
    }
}
