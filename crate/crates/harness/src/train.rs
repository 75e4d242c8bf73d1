//! Seeded, single-threaded training runs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cpool_core::params::ParamStore;
use cpool_core::transformer::Dropout;
use cpool_core::{DType, Graph, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{make_dataset, Dataset, DatasetSpec, Image, ImageData, Split, TokenData, TokenTask};
use crate::error::{HarnessError, Result};
use crate::metrics::{MetricEvent, MetricsWriter, RunRecord};
use crate::model::{flop_estimate, Model, ModelConfig};
use crate::optim::{clip_grad_norm, Adam};
use crate::schedule::lr_at;

const DATA_STREAM: u64 = 0xDA7A_0000_0000_0001;
const DROPOUT_STREAM: u64 = 0xD509_0000_0000_0002;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RECORD_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "model.cpkt";

fn default_base_lr() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    8
}
fn default_seq_len() -> usize {
    64
}
fn default_dropout() -> f64 {
    0.2
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_grad_clip() -> f64 {
    1.0
}
fn default_eval_examples() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    pub total_steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Model positions per training sequence (ignored for images).
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Maximum global gradient norm.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    /// Steps between dev evaluations; 0 evaluates only before and after
    /// training.
    #[serde(default)]
    pub eval_interval: usize,
    /// Cap on dev windows (or images) per evaluation; 0 means all.
    #[serde(default = "default_eval_examples")]
    pub eval_examples: usize,
    #[serde(default)]
    pub dtype: DType,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::Config(m));
        self.model.validate()?;
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.warmup_steps > self.total_steps {
            return fail(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.grad_clip > 0.0) {
            return fail(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        match (&self.model, &self.dataset) {
            (ModelConfig::Transformer(_), DatasetSpec::Shapes { .. }) => fail("the shapes dataset needs a convnet model".into()),
            (ModelConfig::Transformer(m), spec) => {
                if self.seq_len == 0 || self.seq_len > m.max_seq_len {
                    return fail(format!("seq_len {} must lie in 1..={}", self.seq_len, m.max_seq_len));
                }
                let vocab = match spec {
                    DatasetSpec::Copy { vocab, .. } => *vocab,
                    _ => 256,
                };
                if vocab > m.vocab_size {
                    return fail(format!("dataset vocabulary {vocab} overflows model vocab_size {}", m.vocab_size));
                }
                Ok(())
            }
            (ModelConfig::Convnet(m), DatasetSpec::Shapes { .. }) => {
                if m.input_hw != (crate::data::SHAPE_HW, crate::data::SHAPE_HW)
                    || m.in_channels != 1
                    || m.num_classes != crate::data::SHAPE_CLASSES.len()
                {
                    return fail("a shapes convnet needs input_hw (16, 16), 1 channel and 3 classes".into());
                }
                Ok(())
            }
            (ModelConfig::Convnet(_), _) => fail("a convnet needs the shapes dataset".into()),
        }
    }
}

/// Trains without writing files.
pub fn train(config: &TrainConfig) -> Result<RunRecord> {
    train_to(config, None)
}

/// Trains and, with `out_dir`, writes metrics, checkpoints and the run
/// record there.
pub fn train_to(config: &TrainConfig, out_dir: Option<&Path>) -> Result<RunRecord> {
    config.validate()?;
    let data = make_dataset(&config.dataset)?;
    train_on(config, &data, out_dir, &mut |_| {})
}

/// Trains on an already built dataset, reporting every event to `on_event`.
pub fn train_on(
    config: &TrainConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
    on_event: &mut dyn FnMut(&MetricEvent),
) -> Result<RunRecord> {
    config.validate()?;
    match config.dtype {
        DType::F32 => train_impl::<f32>(config, data, out_dir, on_event),
        DType::F64 => train_impl::<f64>(config, data, out_dir, on_event),
    }
}

fn train_impl<S: Scalar>(
    config: &TrainConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
    on_event: &mut dyn FnMut(&MetricEvent),
) -> Result<RunRecord> {
    let started = Instant::now();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let ckpt_path: Option<PathBuf> = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let mut writer = MetricsWriter::new(out_dir.map(|d| d.join(METRICS_FILE)).as_deref())?;
    let (mut store, model) = config.model.build::<S>(config.seed)?;
    let mut adam = Adam::new(&store, config.weight_decay);
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed ^ DATA_STREAM);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(config.seed ^ DROPOUT_STREAM);
    let mut metrics = Vec::new();
    let mut emit = |e: MetricEvent, metrics: &mut Vec<MetricEvent>| -> Result<()> {
        writer.write(&e)?;
        on_event(&e);
        metrics.push(e);
        Ok(())
    };

    let lr0 = lr_at(0, config.base_lr, config.warmup_steps, config.total_steps);
    let mut last_dev = evaluate(&model, &store, data, Split::Dev, config, 0, lr0)?;
    emit(last_dev.clone(), &mut metrics)?;
    if let Some(path) = &ckpt_path {
        checkpoint::save(path, &config.model, &store, 0)?;
    }

    let mut final_train_loss = None;
    for step in 0..config.total_steps {
        let lr = lr_at(step, config.base_lr, config.warmup_steps, config.total_steps);
        let mut g = Graph::<S>::new();
        let p = store.bind(&mut g, true);
        let diverged = |what: String| Err(HarnessError::Diverged { step, what });
        let forward = (|| -> Result<(Var, f64)> {
            let (logits, targets) = match data {
                Dataset::Tokens(tokens) => {
                    let batch = sample_windows(tokens, config.seq_len, config.batch_size, &mut data_rng)?;
                    let seqs: Vec<&[usize]> = batch.iter().map(|(x, _)| x.as_slice()).collect();
                    let mut drop = Dropout {
                        rate: config.dropout,
                        rng: &mut drop_rng,
                    };
                    let out = model.lm_forward(&mut g, &p, &seqs, Some(&mut drop))?;
                    (out.logits, batch.into_iter().flat_map(|(_, t)| t).collect::<Vec<_>>())
                }
                Dataset::Images(images) => {
                    let picks: Vec<&Image> = (0..config.batch_size)
                        .map(|_| &images.train[data_rng.gen_range(0..images.train.len())])
                        .collect();
                    let xs: Vec<Tensor<S>> = picks.iter().map(|im| image_tensor(images, im)).collect::<Result<_>>()?;
                    let logits = model.image_forward(&mut g, &p, &xs)?;
                    (logits, picks.iter().map(|im| Some(im.label)).collect())
                }
            };
            let loss = g.cross_entropy(logits, &targets)?;
            let loss_value = g.value(loss).data()[0].as_f64();
            Ok((loss, loss_value))
        })();
        let (loss, loss_value) = match forward {
            Ok(v) => v,
            // Shapes are fixed after the first step, so a later numeric
            // failure in the forward pass means the parameters blew up.
            Err(HarnessError::Core(cpool_core::Error::InvalidArgument { op, reason })) if step > 0 => {
                return diverged(format!("{op} failed: {reason}"));
            }
            Err(e) => return Err(e),
        };
        if !loss_value.is_finite() {
            return diverged(format!("loss {loss_value}"));
        }
        let mut grads = g.backward(loss)?;
        let mut grads = p.gradients(&mut grads);
        let norm = clip_grad_norm(&mut grads, config.grad_clip);
        if !norm.is_finite() {
            return diverged(format!("gradient norm {norm}"));
        }
        if !adam.step(&mut store, &grads, lr) {
            return diverged(format!("non-finite parameters after the update at lr {lr:e}"));
        }
        final_train_loss = Some(loss_value);
        let done = step + 1;
        let text = matches!(data, Dataset::Tokens(TokenData { task: TokenTask::NextToken, .. }));
        emit(
            MetricEvent {
                step: done,
                split: Split::Train,
                loss: loss_value,
                bpc: text.then_some(loss_value * std::f64::consts::LOG2_E),
                acc: None,
                lr,
            },
            &mut metrics,
        )?;
        let at_interval = config.eval_interval > 0 && done % config.eval_interval == 0;
        if at_interval || done == config.total_steps {
            last_dev = evaluate(&model, &store, data, Split::Dev, config, done, lr)?;
            emit(last_dev.clone(), &mut metrics)?;
            if let Some(path) = &ckpt_path {
                checkpoint::save(path, &config.model, &store, done)?;
            }
        }
    }
    writer.flush()?;

    let record = RunRecord {
        config: config.clone(),
        metrics,
        final_train_loss,
        final_dev: last_dev,
        checkpoint: ckpt_path,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        param_count: store.count_trainable(),
        cp_param_count: config.model.cp_param_count(),
        flops: flop_estimate(&config.model, config.seq_len),
    };
    if let Some(dir) = out_dir {
        let path = dir.join(RECORD_FILE);
        let json = serde_json::to_string_pretty(&record)?;
        std::fs::write(&path, json).map_err(|e| HarnessError::io(&path, e))?;
    }
    Ok(record)
}

fn sample_windows<R: Rng>(
    data: &TokenData,
    n: usize,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<(Vec<usize>, Vec<Option<usize>>)>> {
    let len = data.window_len(n);
    if data.train.len() < len {
        return Err(HarnessError::Data(format!(
            "train split of {} tokens is shorter than one window of {len}",
            data.train.len()
        )));
    }
    Ok((0..batch)
        .map(|_| {
            let start = rng.gen_range(0..=data.train.len() - len);
            data.example(&data.train[start..start + len])
        })
        .collect())
}

pub(crate) fn image_tensor<S: Scalar>(data: &ImageData, image: &Image) -> Result<Tensor<S>> {
    let px: Vec<S> = image.pixels.iter().map(|&v| S::from_f64_lossy(v)).collect();
    Ok(Tensor::new([data.hw.0, data.hw.1, 1], px)?)
}

/// Non-overlapping windows of `split`: model inputs start every `n` tokens.
pub fn eval_windows(data: &TokenData, split: Split, n: usize, cap: usize) -> Vec<(Vec<usize>, Vec<Option<usize>>)> {
    let stream = data.split(split);
    let len = data.window_len(n);
    let mut out = Vec::new();
    let mut start = 0;
    while start + len <= stream.len() && (cap == 0 || out.len() < cap) {
        out.push(data.example(&stream[start..start + len]));
        start += n;
    }
    out
}

/// Loss, and BPC or accuracy, of the model on `split` without dropout.
pub fn evaluate<S: Scalar>(
    model: &Model,
    store: &ParamStore<S>,
    data: &Dataset,
    split: Split,
    config: &TrainConfig,
    step: usize,
    lr: f64,
) -> Result<MetricEvent> {
    let mut score = Score::default();
    match data {
        Dataset::Tokens(tokens) => {
            let windows = eval_windows(tokens, split, config.seq_len, config.eval_examples);
            if windows.is_empty() {
                return Err(HarnessError::Data(format!("{split:?} split is shorter than one window")));
            }
            for chunk in windows.chunks(config.batch_size) {
                let mut g = Graph::<S>::new();
                let p = store.bind(&mut g, false);
                let seqs: Vec<&[usize]> = chunk.iter().map(|(x, _)| x.as_slice()).collect();
                let out = model.lm_forward(&mut g, &p, &seqs, None)?;
                let targets: Vec<Option<usize>> = chunk.iter().flat_map(|(_, t)| t.iter().copied()).collect();
                score.add(g.value(out.logits), &targets);
            }
            Ok(match tokens.task {
                TokenTask::NextToken => score.event(step, split, lr, true, false),
                TokenTask::Copy { .. } => score.event(step, split, lr, false, true),
            })
        }
        Dataset::Images(images) => {
            let set = images.split(split);
            let take = if config.eval_examples == 0 { set.len() } else { set.len().min(config.eval_examples) };
            if take == 0 {
                return Err(HarnessError::Data(format!("{split:?} split is empty")));
            }
            for chunk in set[..take].chunks(config.batch_size.max(16)) {
                let mut g = Graph::<S>::new();
                let p = store.bind(&mut g, false);
                let xs: Vec<Tensor<S>> = chunk.iter().map(|im| image_tensor(images, im)).collect::<Result<_>>()?;
                let logits = model.image_forward(&mut g, &p, &xs)?;
                let targets: Vec<Option<usize>> = chunk.iter().map(|im| Some(im.label)).collect();
                score.add(g.value(logits), &targets);
            }
            Ok(score.event(step, split, lr, false, true))
        }
    }
}

#[derive(Default)]
struct Score {
    nats: f64,
    correct: usize,
    count: usize,
}

impl Score {
    fn add<S: Scalar>(&mut self, logits: &Tensor<S>, targets: &[Option<usize>]) {
        let vocab = logits.shape()[1];
        for (row, target) in logits.data().chunks(vocab).zip(targets) {
            let Some(t) = *target else { continue };
            let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            self.nats += lse - row[t];
            // first maximum wins ties
            let arg = row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            self.correct += usize::from(arg == t);
            self.count += 1;
        }
    }

    fn event(&self, step: usize, split: Split, lr: f64, bpc: bool, acc: bool) -> MetricEvent {
        let loss = self.nats / self.count as f64;
        MetricEvent {
            step,
            split,
            loss,
            bpc: bpc.then_some(loss * std::f64::consts::LOG2_E),
            acc: acc.then(|| self.correct as f64 / self.count as f64),
            lr,
        }
    }
}
