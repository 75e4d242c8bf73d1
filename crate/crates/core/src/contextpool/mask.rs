//! Locality masks and the anchor/source geometry they are built on.

use rand::seq::index::sample;
use rand::Rng;

/// Unnormalized discrete Gaussian centred on `center`:
/// `g[j] = exp(-(j - center)^2 / (2 sigma^2))`, so `g[center] = 1`.
///
/// With `causal` every entry after `center` is exactly zero; with
/// `truncation = Some(t)` entries farther than `t * sigma` are zero.
pub fn gaussian_mask(center: usize, sigma: f64, n: usize, causal: bool, truncation: Option<f64>) -> Vec<f64> {
    assert!(center < n, "center {center} outside 0..{n}");
    (0..n)
        .map(|j| {
            let d = j as f64 - center as f64;
            if causal && j > center {
                return 0.0;
            }
            if truncation.is_some_and(|t| d.abs() > t * sigma) {
                return 0.0;
            }
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Anchor (output) and source (input) positions of one pooling layer.
///
/// Sequences use one axis with anchors on every position. Feature maps use two
/// axes with anchors on the stride grid, offset by `(stride - 1) / 2`.
#[derive(Debug, Clone)]
pub struct Geometry {
    extent: [usize; 2],
    out_extent: [usize; 2],
    anchors: Vec<[f64; 2]>,
    causal: bool,
    dist2: Vec<f64>,
    row_min: Vec<f64>,
}

impl Geometry {
    pub fn line(n: usize, causal: bool) -> Self {
        let anchors = (0..n).map(|i| [0.0, i as f64]).collect();
        Self::build([1, n], [1, n], anchors, causal)
    }

    pub fn grid(h: usize, w: usize, stride: usize) -> Self {
        assert!(stride >= 1, "stride must be positive");
        let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
        let off = (stride as f64 - 1.0) / 2.0;
        let mut anchors = Vec::with_capacity(ho * wo);
        for ky in 0..ho {
            for kx in 0..wo {
                anchors.push([(ky * stride) as f64 + off, (kx * stride) as f64 + off]);
            }
        }
        Self::build([h, w], [ho, wo], anchors, false)
    }

    fn build(extent: [usize; 2], out_extent: [usize; 2], anchors: Vec<[f64; 2]>, causal: bool) -> Self {
        let sources = extent[0] * extent[1];
        let mut dist2 = Vec::with_capacity(anchors.len() * sources);
        let mut row_min = Vec::with_capacity(anchors.len());
        for a in &anchors {
            let mut lo = f64::INFINITY;
            for s in 0..sources {
                let (y, x) = ((s / extent[1]) as f64, (s % extent[1]) as f64);
                let d = (y - a[0]).powi(2) + (x - a[1]).powi(2);
                lo = lo.min(d);
                dist2.push(d);
            }
            row_min.push(lo);
        }
        Geometry {
            extent,
            out_extent,
            anchors,
            causal,
            dist2,
            row_min,
        }
    }

    pub fn anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn sources(&self) -> usize {
        self.extent[0] * self.extent[1]
    }

    pub fn out_extent(&self) -> [usize; 2] {
        self.out_extent
    }

    pub fn is_causal(&self) -> bool {
        self.causal
    }

    /// Squared anchor-source distances minus each anchor's nearest distance,
    /// row-major `[anchors, sources]`. Gaussians built from these peak at 1.
    pub fn shifted_dist2(&self) -> Vec<f64> {
        let s = self.sources();
        self.dist2
            .iter()
            .enumerate()
            .map(|(k, &d)| d - self.row_min[k / s])
            .collect()
    }

    pub fn dist2(&self, anchor: usize, source: usize) -> f64 {
        self.dist2[anchor * self.sources() + source]
    }

    /// Causal support: source index at or before the anchor (sequences only).
    pub fn causal_support(&self) -> Option<Vec<bool>> {
        if !self.causal {
            return None;
        }
        let n = self.sources();
        Some((0..self.anchors() * n).map(|k| k % n <= k / n).collect())
    }

    fn combine(&self, mut support: Vec<bool>) -> Vec<bool> {
        if let Some(c) = self.causal_support() {
            support.iter_mut().zip(c).for_each(|(s, c)| *s &= c);
        }
        support
    }

    /// Binary window of `width` sources per axis around each anchor.
    ///
    /// Windows are shifted to stay inside the input, so `width >= extent`
    /// covers every source. In causal mode the window trails the anchor.
    pub fn fixed_window(&self, width: usize) -> Vec<bool> {
        let s = self.sources();
        let mut support = vec![false; self.anchors() * s];
        for (k, a) in self.anchors.iter().enumerate() {
            let ranges: Vec<(usize, usize)> = (0..2)
                .map(|axis| {
                    let len = self.extent[axis];
                    let wd = width.min(len);
                    if self.causal && axis == 1 {
                        let c = a[1] as usize;
                        (c + 1 - wd.min(c + 1), c + 1)
                    } else {
                        let start = (a[axis] - (wd as f64 - 1.0) / 2.0).round();
                        let start = start.clamp(0.0, (len - wd) as f64) as usize;
                        (start, start + wd)
                    }
                })
                .collect();
            for y in ranges[0].0..ranges[0].1 {
                for x in ranges[1].0..ranges[1].1 {
                    support[k * s + y * self.extent[1] + x] = true;
                }
            }
        }
        self.combine(support)
    }

    /// Sources within distance `round(sigma_k)` of each anchor. The nearest
    /// sources are always kept so no row is empty.
    pub fn adaptive_window(&self, sigmas: &[f64]) -> Vec<bool> {
        assert_eq!(sigmas.len(), self.anchors());
        let s = self.sources();
        let support = (0..self.anchors() * s)
            .map(|k| {
                let a = k / s;
                let r = sigmas[a].round();
                self.dist2[k] <= (r * r).max(self.row_min[a])
            })
            .collect();
        self.combine(support)
    }

    /// Sources within `t * sigma_k` of each anchor (nearest sources always kept).
    pub fn truncation(&self, sigmas: &[f64], t: f64) -> Vec<bool> {
        assert_eq!(sigmas.len(), self.anchors());
        let s = self.sources();
        let support = (0..self.anchors() * s)
            .map(|k| {
                let a = k / s;
                let r = t * sigmas[a];
                self.dist2[k] <= (r * r).max(self.row_min[a])
            })
            .collect();
        self.combine(support)
    }

    /// Support containing `ceil(keep_fraction * sources)` random sources per
    /// anchor, always including the nearest source.
    pub fn random_sparse<R: Rng + ?Sized>(&self, keep_fraction: f64, rng: &mut R) -> Vec<bool> {
        let s = self.sources();
        let keep = ((keep_fraction * s as f64).ceil() as usize).clamp(1, s);
        let mut support = vec![false; self.anchors() * s];
        for a in 0..self.anchors() {
            for j in sample(rng, s, keep) {
                support[a * s + j] = true;
            }
            for j in 0..s {
                if self.dist2[a * s + j] <= self.row_min[a] {
                    support[a * s + j] = true;
                }
            }
        }
        self.combine(support)
    }

    /// `[anchors, sources]` matrix averaging each anchor's `stride x stride`
    /// input block (identity for sequences).
    pub fn block_average(&self, stride: usize) -> Vec<f64> {
        let s = self.sources();
        let [ho, wo] = self.out_extent;
        let mut m = vec![0.0; self.anchors() * s];
        for ky in 0..ho {
            for kx in 0..wo {
                let a = ky * wo + kx;
                let ys = ky * stride..((ky + 1) * stride).min(self.extent[0]);
                let xs = kx * stride..((kx + 1) * stride).min(self.extent[1]);
                let count = (ys.len() * xs.len()) as f64;
                for y in ys {
                    for x in xs.clone() {
                        m[a * s + y * self.extent[1] + x] = 1.0 / count;
                    }
                }
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_peak_is_one() {
        for sigma in [0.1, 0.5, 3.0, 100.0] {
            let g = gaussian_mask(4, sigma, 9, false, None);
            assert_eq!(g[4], 1.0);
        }
    }

    #[test]
    fn floor_sigma_is_effectively_one_hot() {
        let g = gaussian_mask(5, 0.1, 10, false, None);
        assert!((g[4] - (-50.0f64).exp()).abs() < 1e-30);
        assert!(g[4] < 1e-21 && g[6] < 1e-21);
    }

    #[test]
    fn gaussian_matches_direct_formula() {
        let g = gaussian_mask(3, 0.5, 10, false, None);
        for (j, v) in g.iter().enumerate() {
            let d = j as f64 - 3.0;
            assert!((v - (-d * d / 0.5).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_and_truncated_entries_are_zero() {
        let g = gaussian_mask(3, 2.0, 10, true, None);
        assert!(g[4..].iter().all(|&v| v == 0.0));
        let t = gaussian_mask(5, 1.0, 12, false, Some(2.0));
        assert_eq!(t[2], 0.0);
        assert!(t[3] > 0.0 && t[7] > 0.0);
        assert_eq!(t[8], 0.0);
    }

    #[test]
    fn fixed_window_extremes() {
        let g = Geometry::line(5, false);
        assert!(g.fixed_window(5).iter().all(|&b| b));
        let id = g.fixed_window(1);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(id[i * 5 + j], i == j);
            }
        }
        let c = Geometry::line(5, true).fixed_window(2);
        assert!(c[2 * 5 + 1] && c[2 * 5 + 2] && !c[2 * 5 + 3] && !c[2 * 5]);
    }

    #[test]
    fn grid_centres_sit_on_stride_grid() {
        let g = Geometry::grid(4, 4, 2);
        assert_eq!(g.anchors(), 4);
        assert_eq!(g.out_extent(), [2, 2]);
        // anchor 0 sits at (0.5, 0.5): four nearest sources tie
        let d = g.shifted_dist2();
        let zeros = d[..16].iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 4);
        let avg = g.block_average(2);
        assert_eq!(avg[0], 0.25);
        assert_eq!(avg[1], 0.25);
        assert_eq!(avg[2], 0.0);
    }

    #[test]
    fn random_sparse_keeps_fraction_and_nearest() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let g = Geometry::line(20, false);
        let m = g.random_sparse(0.25, &mut rng);
        for i in 0..20 {
            let row = &m[i * 20..(i + 1) * 20];
            assert!(row[i]);
            let kept = row.iter().filter(|&&b| b).count();
            assert!((5..=6).contains(&kept), "{kept}");
        }
    }
}
