//! JSON-lines metric events and the run summary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{HarnessError, Result};
use crate::model::FlopEstimate;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEvent {
    pub step: usize,
    pub split: Split,
    /// Mean cross-entropy in nats.
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bpc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    pub lr: f64,
}

impl MetricEvent {
    /// Headline number for comparisons: accuracy when the task has one,
    /// otherwise BPC, otherwise loss.
    pub fn headline(&self) -> f64 {
        self.acc.or(self.bpc).unwrap_or(self.loss)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    /// Every train and dev event in step order.
    pub metrics: Vec<MetricEvent>,
    pub final_train_loss: Option<f64>,
    pub final_dev: MetricEvent,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
    pub param_count: usize,
    pub cp_param_count: usize,
    /// Forward FLOPs of one training example.
    pub flops: FlopEstimate,
}

impl RunRecord {
    pub fn dev_events(&self) -> impl Iterator<Item = &MetricEvent> {
        self.metrics.iter().filter(|e| e.split == Split::Dev)
    }

    pub fn train_events(&self) -> impl Iterator<Item = &MetricEvent> {
        self.metrics.iter().filter(|e| e.split == Split::Train)
    }
}

/// Optional JSON-lines sink; a no-op without a path.
pub struct MetricsWriter {
    out: Option<(PathBuf, BufWriter<File>)>,
}

impl MetricsWriter {
    pub fn new(path: Option<&Path>) -> Result<Self> {
        let out = match path {
            Some(p) => Some((p.to_path_buf(), BufWriter::new(File::create(p).map_err(|e| HarnessError::io(p, e))?))),
            None => None,
        };
        Ok(MetricsWriter { out })
    }

    pub fn write(&mut self, event: &MetricEvent) -> Result<()> {
        if let Some((path, w)) = &mut self.out {
            serde_json::to_writer(&mut *w, event)?;
            w.write_all(b"\n").map_err(|e| HarnessError::io(path.clone(), e))?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, w)) = &mut self.out {
            w.flush().map_err(|e| HarnessError::io(path.clone(), e))?;
        }
        Ok(())
    }
}
