//! Small image classifier with pluggable pooling between conv stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::contextpool::{ContextPool2d, ContextPoolConfig};
use crate::error::{Error, Result};
use crate::params::{fan_in_normal, normal, Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::transformer::CP_SEED_STREAM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    #[default]
    Average,
    Max,
    Contextpool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub channels: usize,
    pub convs: usize,
}

fn default_stages() -> Vec<StageSpec> {
    [16, 32, 64].iter().map(|&channels| StageSpec { channels, convs: 2 }).collect()
}

fn default_stride() -> usize {
    2
}

fn default_cp() -> ContextPoolConfig {
    ContextPoolConfig::image()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvNetConfig {
    /// Input height and width.
    pub input_hw: (usize, usize),
    pub in_channels: usize,
    #[serde(default = "default_stages")]
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub pooling: PoolingKind,
    #[serde(default = "default_cp")]
    pub cp: ContextPoolConfig,
    /// Stride (and region size for average/max) of each pooling layer.
    #[serde(default = "default_stride")]
    pub stride: usize,
    pub num_classes: usize,
}

impl ConvNetConfig {
    /// Three stages of two 3x3 convs (16, 32, 64 channels).
    pub fn small(input_hw: (usize, usize), in_channels: usize, num_classes: usize, pooling: PoolingKind) -> Self {
        ConvNetConfig {
            input_hw,
            in_channels,
            stages: default_stages(),
            pooling,
            cp: ContextPoolConfig::image(),
            stride: default_stride(),
            num_classes,
        }
    }

    pub fn pool_layers(&self) -> usize {
        self.stages.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() || self.stages.iter().any(|s| s.channels == 0 || s.convs == 0) {
            return fail("every stage needs at least one conv with positive channels".into());
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return fail("in_channels and num_classes must be positive".into());
        }
        if self.stride == 0 {
            return fail("stride must be at least 1".into());
        }
        let total = self.stride.pow(self.pool_layers() as u32);
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % total != 0 || w % total != 0 {
            return fail(format!("input {h}x{w} is not divisible by the cumulative stride {total}"));
        }
        if self.pooling == PoolingKind::Contextpool {
            if self.cp.causal {
                return fail("image pooling cannot be causal".into());
            }
            self.cp.validate()?;
        }
        Ok(())
    }

    /// Spatial extent entering pooling layer `i`.
    pub fn extent_before_pool(&self, i: usize) -> (usize, usize) {
        let f = self.stride.pow(i as u32);
        (self.input_hw.0 / f, self.input_hw.1 / f)
    }

    pub fn backbone_param_count(&self) -> usize {
        let mut cin = self.in_channels;
        let mut total = 0;
        for st in &self.stages {
            for _ in 0..st.convs {
                total += 9 * cin * st.channels + st.channels;
                cin = st.channels;
            }
        }
        total + cin * self.num_classes + self.num_classes
    }

    pub fn cp_param_count(&self) -> usize {
        if self.pooling != PoolingKind::Contextpool {
            return 0;
        }
        (0..self.pool_layers())
            .map(|i| ContextPool2d::param_count(self.stages[i].channels, &self.cp))
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.backbone_param_count() + self.cp_param_count()
    }

    /// Forward matmul/conv FLOPs for one image, split into
    /// `(backbone, contextpool)`. Average pooling counts as backbone.
    pub fn flop_estimate(&self) -> (u64, u64) {
        let (mut h, mut w) = self.input_hw;
        let mut cin = self.in_channels as u64;
        let (mut backbone, mut cp) = (0u64, 0u64);
        let s = self.stride;
        for (i, st) in self.stages.iter().enumerate() {
            if i > 0 {
                let (ho, wo) = (h / s, w / s);
                let (src, dst) = ((h * w) as u64, (ho * wo) as u64);
                match self.pooling {
                    PoolingKind::Average => backbone += 2 * dst * src * cin,
                    PoolingKind::Max => {}
                    PoolingKind::Contextpool => cp += cp2d_flops(&self.cp, (h, w), s, cin as usize),
                }
                h = ho;
                w = wo;
            }
            for _ in 0..st.convs {
                backbone += 2 * (h * w) as u64 * 9 * cin * st.channels as u64;
                cin = st.channels as u64;
            }
        }
        (backbone + 2 * cin * self.num_classes as u64, cp)
    }
}

/// Forward matmul/conv FLOPs of one 2D ContextPool call on `[h, w, c]`.
pub fn cp2d_flops(cp: &ContextPoolConfig, hw: (usize, usize), stride: usize, c: usize) -> u64 {
    let (src, c) = ((hw.0 * hw.1) as u64, c as u64);
    let anchors = (hw.0.div_ceil(stride) * hw.1.div_ceil(stride)) as u64;
    let (k2, hid) = ((cp.kernel_size * cp.kernel_size) as u64, cp.hidden_for(c as usize) as u64);
    let predictor = 2 * src * k2 * c * hid + 2 * src * k2 * hid * 2;
    let sigma = if stride > 1 { 2 * anchors * src } else { 0 };
    let nl = if cp.weighting == crate::contextpool::WeightingMode::Nonlocal {
        let avg = if stride > 1 { 2 * anchors * src * c } else { 0 };
        avg + 2 * anchors * c * c + 2 * src * c * c + 2 * anchors * c * src
    } else {
        0
    };
    predictor + sigma + nl + 2 * anchors * src * c
}

/// Mean over each `region x region` window, windows `stride` apart.
pub fn avg_pool<S: Scalar>(g: &mut Graph<S>, x: Var, region: usize, stride: usize) -> Result<Var> {
    let (h, w, c) = match g.shape(x) {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::invalid("avg_pool", format!("expected [h, w, c], got {s:?}"))),
    };
    if region == 0 || stride == 0 || region > h || region > w {
        return Err(Error::invalid("avg_pool", format!("region {region} stride {stride} on {h}x{w}")));
    }
    let (ho, wo) = ((h - region) / stride + 1, (w - region) / stride + 1);
    let share = 1.0 / (region * region) as f64;
    let mut m = vec![0.0; ho * wo * h * w];
    for oy in 0..ho {
        for ox in 0..wo {
            for dy in 0..region {
                for dx in 0..region {
                    m[(oy * wo + ox) * h * w + (oy * stride + dy) * w + ox * stride + dx] = share;
                }
            }
        }
    }
    let pm = g.constant(Tensor::from_f64([ho * wo, h * w], &m)?);
    let flat = g.reshape(x, [h * w, c])?;
    let y = g.matmul(pm, flat)?;
    g.reshape(y, [ho, wo, c])
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct ConvNet {
    pub config: ConvNetConfig,
    /// `stages[i][j]` is conv `j` of stage `i`.
    pub stages: Vec<Vec<ConvLayer>>,
    /// One per pooling layer when pooling is ContextPool.
    pub pools: Vec<ContextPool2d>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl ConvNet {
    /// Builds the network. Conv stages and head use one stream of `seed` and
    /// ContextPool another, so every pooling kind shares the same backbone.
    pub fn new<S: Scalar>(config: &ConvNetConfig, seed: u64) -> Result<(ParamStore<S>, Self)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cp_rng = ChaCha8Rng::seed_from_u64(seed ^ CP_SEED_STREAM);
        let mut cin = config.in_channels;
        let mut stages = Vec::new();
        for (i, st) in config.stages.iter().enumerate() {
            let mut convs = Vec::new();
            for j in 0..st.convs {
                let fan = 9 * cin;
                let std = (2.0 / fan as f64).sqrt();
                let kernel = store.add(format!("stage{i}.conv{j}.kernel"), normal(&mut rng, [3, 3, cin, st.channels], std));
                let bias = store.add(format!("stage{i}.conv{j}.bias"), Tensor::zeros([st.channels]));
                convs.push(ConvLayer { kernel, bias });
                cin = st.channels;
            }
            stages.push(convs);
        }
        let head_w = store.add("head.w", fan_in_normal(&mut rng, [cin, config.num_classes], cin));
        let head_b = store.add("head.b", Tensor::zeros([config.num_classes]));
        let mut pools = Vec::new();
        if config.pooling == PoolingKind::Contextpool {
            for i in 0..config.pool_layers() {
                let hw = config.extent_before_pool(i);
                let c = config.stages[i].channels;
                pools.push(ContextPool2d::new(&mut store, &mut cp_rng, &format!("pool{i}"), c, hw, config.stride, &config.cp)?);
            }
        }
        Ok((
            store,
            ConvNet {
                config: config.clone(),
                stages,
                pools,
                head_w,
                head_b,
            },
        ))
    }

    fn pool<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, i: usize) -> Result<Var> {
        let s = self.config.stride;
        match self.config.pooling {
            PoolingKind::Average => avg_pool(g, x, s, s),
            PoolingKind::Max => g.max_pool2d(x, s, s),
            PoolingKind::Contextpool => self.pools[i].forward(g, p, x).map(|o| o.y),
        }
    }

    /// Class logits `[1, classes]` for one image `[h, w, c]`.
    pub fn classifier_forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, image: Var) -> Result<Var> {
        let (h, w) = self.config.input_hw;
        if g.shape(image) != [h, w, self.config.in_channels] {
            return Err(Error::shape("classifier_forward", g.shape(image), &[h, w, self.config.in_channels]));
        }
        let mut x = image;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                x = self.pool(g, p, x, i - 1)?;
            }
            for conv in stage {
                x = g.conv2d(x, p[conv.kernel], p[conv.bias])?;
                x = g.relu(x);
            }
        }
        let (hh, ww, c) = match g.shape(x) {
            [a, b, c] => (*a, *b, *c),
            _ => unreachable!("conv output is rank 3"),
        };
        let flat = g.reshape(x, [hh * ww, c])?;
        let pooled = g.col_sum(flat)?;
        let pooled = g.scale(pooled, 1.0 / (hh * ww) as f64);
        let logits = g.matmul(pooled, p[self.head_w])?;
        g.add_row(logits, p[self.head_b])
    }

    /// Logits `[batch, classes]` for a batch of images.
    pub fn forward_batch<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, images: &[Tensor<S>]) -> Result<Var> {
        let mut rows = Vec::with_capacity(images.len());
        for img in images {
            let x = g.constant(img.clone());
            rows.push(self.classifier_forward(g, p, x)?);
        }
        match rows.len() {
            0 => Err(Error::invalid("classifier_forward", "empty batch")),
            1 => Ok(rows[0]),
            _ => g.concat_rows(&rows),
        }
    }
}

/// Free-function form of [`ConvNet::classifier_forward`].
pub fn classifier_forward<S: Scalar>(g: &mut Graph<S>, p: &Bound, image: Var, net: &ConvNet) -> Result<Var> {
    net.classifier_forward(g, p, image)
}
