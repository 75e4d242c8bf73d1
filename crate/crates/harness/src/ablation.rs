//! Variant sweeps over a shared seed set, summarised as a comparison table.

use cpool_core::contextpool::{ContextPoolConfig, LocalityMode, WeightingMode};
use serde::{Deserialize, Serialize};

use crate::data::{make_dataset, Dataset};
use crate::error::Result;
use crate::metrics::{MetricEvent, RunRecord};
use crate::model::{flop_estimate, with_contextpool};
use crate::train::{train_on, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    /// `None` is the model without ContextPool.
    pub cp: Option<ContextPoolConfig>,
}

impl Variant {
    pub fn baseline() -> Self {
        Variant {
            label: "baseline".into(),
            cp: None,
        }
    }

    pub fn contextpool(cp: ContextPoolConfig) -> Self {
        Variant {
            label: cp.variant_label(),
            cp: Some(cp),
        }
    }
}

/// The eight ContextPool variants: the learned + Gaussian default, three
/// alternative weightings, and four alternative locality priors.
pub fn standard_variants(base: &ContextPoolConfig, window: usize, keep_fraction: f64) -> Vec<Variant> {
    let with = |weighting, locality| {
        Variant::contextpool(ContextPoolConfig {
            weighting,
            locality,
            ..base.clone()
        })
    };
    vec![
        with(WeightingMode::Learned, LocalityMode::Gaussian),
        with(WeightingMode::Unnormalized, LocalityMode::Gaussian),
        with(WeightingMode::Uniform, LocalityMode::Gaussian),
        with(WeightingMode::Nonlocal, LocalityMode::Gaussian),
        with(WeightingMode::Learned, LocalityMode::None),
        with(WeightingMode::Learned, LocalityMode::FixedWindow { width: window }),
        with(WeightingMode::Learned, LocalityMode::AdaptiveWindow),
        with(WeightingMode::Learned, LocalityMode::RandomSparse { keep_fraction }),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub params: usize,
    pub cp_params: usize,
    /// Forward FLOPs of one example.
    pub flops: u64,
    pub cp_flops: u64,
    /// Final dev metric per seed, in seed order.
    pub values: Vec<f64>,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    /// `acc`, `bpc` or `loss`.
    pub metric: String,
    pub higher_is_better: bool,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn metric_name(e: &MetricEvent) -> (&'static str, bool) {
    if e.acc.is_some() {
        ("acc", true)
    } else if e.bpc.is_some() {
        ("bpc", false)
    } else {
        ("loss", false)
    }
}

impl AblationTable {
    /// Rows holding the best value (ties included) for seed column `k`.
    pub fn best_rows(&self, k: usize) -> Vec<usize> {
        let better = |a: f64, b: f64| if self.higher_is_better { a > b } else { a < b };
        let best = self
            .rows
            .iter()
            .map(|r| r.values[k])
            .fold(None, |acc: Option<f64>, v| match acc {
                Some(b) if !better(v, b) => Some(b),
                _ => Some(v),
            });
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| Some(r.values[k]) == best)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "| variant | params | cp params | flops | cp flops | dev {} median | min | max |\n|---|---:|---:|---:|---:|---:|---:|---:|\n",
            self.metric
        );
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {:.4} | {:.4} | {:.4} |\n",
                r.variant, r.params, r.cp_params, r.flops, r.cp_flops, r.median, r.min, r.max
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(|s| format!("seed{s}")).collect();
        let mut out = format!("variant,params,cp_params,flops,cp_flops,median,min,max,{}\n", seeds.join(","));
        for r in &self.rows {
            let vals: Vec<String> = r.values.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.variant,
                r.params,
                r.cp_params,
                r.flops,
                r.cp_flops,
                r.median,
                r.min,
                r.max,
                vals.join(",")
            ));
        }
        out
    }
}

/// Trains every variant of `base` once per seed and tabulates the final dev
/// metric. `on_run` sees each finished run.
pub fn ablation_sweep(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    on_run: &mut dyn FnMut(&Variant, u64, &RunRecord),
) -> Result<AblationTable> {
    base.validate()?;
    let data: Dataset = make_dataset(&base.dataset)?;
    let mut rows = Vec::with_capacity(variants.len());
    let mut metric = ("loss", false);
    for variant in variants {
        let config = TrainConfig {
            model: with_contextpool(&base.model, variant.cp.as_ref()),
            ..base.clone()
        };
        let mut values = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let run = train_on(&TrainConfig { seed, ..config.clone() }, &data, None, &mut |_| {})?;
            metric = metric_name(&run.final_dev);
            values.push(run.final_dev.headline());
            on_run(variant, seed, &run);
        }
        let flops = flop_estimate(&config.model, config.seq_len);
        rows.push(AblationRow {
            variant: variant.label.clone(),
            params: config.model.param_count(),
            cp_params: config.model.cp_param_count(),
            flops: flops.total,
            cp_flops: flops.contextpool,
            median: median(&values),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            values,
        });
    }
    Ok(AblationTable {
        metric: metric.0.into(),
        higher_is_better: metric.1,
        seeds: seeds.to_vec(),
        rows,
    })
}
