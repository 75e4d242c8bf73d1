//! Desk-scale experiments around ContextPool: datasets, Adam, seeded
//! training runs, `CPKT1` checkpoints, JSON-lines metrics and ablation
//! sweeps.

pub mod ablation;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod presets;
pub mod schedule;
pub mod train;

pub use error::{HarnessError, Result};
pub use model::{flop_estimate, FlopEstimate, Model, ModelConfig};
pub use train::{train, train_on, train_to, TrainConfig};
