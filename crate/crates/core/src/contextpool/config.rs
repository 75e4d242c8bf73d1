use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How per-position pooling weights are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    /// Softmax over positions of the predictor's weight channel.
    #[default]
    Learned,
    /// Raw weight-channel outputs, no softmax.
    Unnormalized,
    /// `1/n` everywhere.
    Uniform,
    /// Per-anchor softmax of `theta(x_i) . phi(x_j)`.
    Nonlocal,
}

/// Which locality prior multiplies the pooling weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LocalityMode {
    /// Per-anchor Gaussian with learned standard deviation.
    #[default]
    Gaussian,
    /// No locality prior: every position has mask value 1.
    None,
    /// Binary window of `width` positions around the anchor.
    FixedWindow { width: usize },
    /// Binary window with half-width `round(sigma_i)`; gradients reach the
    /// size channel through the Gaussian surrogate.
    AdaptiveWindow,
    /// Fixed random support sampled once per layer at initialisation.
    RandomSparse { keep_fraction: f64 },
}

fn default_r() -> f64 {
    0.1
}
fn default_kernel_size() -> usize {
    3
}
fn default_sigma_floor() -> f64 {
    0.1
}
fn default_size_bias_init() -> f64 {
    -3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextPoolConfig {
    /// Scale from normalized size `s` to standard deviation.
    #[serde(default = "default_r")]
    pub r: f64,
    /// Predictor kernel extent (odd).
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    /// Predictor hidden width; `None` means `max(d / 8, 8)`.
    #[serde(default)]
    pub hidden_channels: Option<usize>,
    #[serde(default)]
    pub weighting: WeightingMode,
    #[serde(default)]
    pub locality: LocalityMode,
    #[serde(default)]
    pub causal: bool,
    #[serde(default = "default_sigma_floor")]
    pub sigma_floor: f64,
    /// Zero mask entries farther than this many standard deviations.
    #[serde(default)]
    pub mask_truncation: Option<f64>,
    /// Initial bias of the size channel. Negative values start the layer
    /// close to the identity map.
    #[serde(default = "default_size_bias_init")]
    pub size_bias_init: f64,
}

impl Default for ContextPoolConfig {
    fn default() -> Self {
        ContextPoolConfig {
            r: default_r(),
            kernel_size: default_kernel_size(),
            hidden_channels: None,
            weighting: WeightingMode::default(),
            locality: LocalityMode::default(),
            causal: false,
            sigma_floor: default_sigma_floor(),
            mask_truncation: None,
            size_bias_init: default_size_bias_init(),
        }
    }
}

impl ContextPoolConfig {
    /// Defaults for 2D feature maps: `r = 0.05`, and a neutral size bias so
    /// that `sigma` starts above the floor and the size channel gets
    /// gradients.
    pub fn image() -> Self {
        ContextPoolConfig {
            r: 0.05,
            size_bias_init: 0.0,
            ..Self::default()
        }
    }

    pub fn hidden_for(&self, d: usize) -> usize {
        self.hidden_channels.unwrap_or_else(|| (d / 8).max(8))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::Config(format!("contextpool.r must be positive, got {}", self.r)));
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            return Err(Error::Config(format!(
                "contextpool.sigma_floor must be positive, got {}",
                self.sigma_floor
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "contextpool.kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.hidden_channels == Some(0) {
            return Err(Error::Config("contextpool.hidden_channels must be positive".into()));
        }
        if let Some(t) = self.mask_truncation {
            if !(t > 0.0) {
                return Err(Error::Config(format!("contextpool.mask_truncation must be positive, got {t}")));
            }
        }
        match self.locality {
            LocalityMode::FixedWindow { width: 0 } => {
                Err(Error::Config("contextpool.locality.width must be at least 1".into()))
            }
            LocalityMode::RandomSparse { keep_fraction } if !(keep_fraction > 0.0 && keep_fraction <= 1.0) => Err(
                Error::Config(format!("contextpool.locality.keep_fraction must lie in (0, 1], got {keep_fraction}")),
            ),
            _ => Ok(()),
        }
    }

    /// Short label used in ablation tables.
    pub fn variant_label(&self) -> String {
        let w = match self.weighting {
            WeightingMode::Learned => "learned",
            WeightingMode::Unnormalized => "unnormalized",
            WeightingMode::Uniform => "uniform",
            WeightingMode::Nonlocal => "nonlocal",
        };
        let l = match self.locality {
            LocalityMode::Gaussian => "gaussian".to_string(),
            LocalityMode::None => "none".to_string(),
            LocalityMode::FixedWindow { width } => format!("fixed_window({width})"),
            LocalityMode::AdaptiveWindow => "adaptive_window".to_string(),
            LocalityMode::RandomSparse { keep_fraction } => format!("random_sparse({keep_fraction})"),
        };
        format!("{w}+{l}")
    }
}
