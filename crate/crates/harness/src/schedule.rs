//! Learning-rate schedule: linear warmup, then cosine decay to zero.

use std::f64::consts::PI;

/// Learning rate for the update at `step` (0-based).
pub fn lr_at(step: usize, base_lr: f64, warmup_steps: usize, total_steps: usize) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    0.5 * base_lr * (1.0 + (PI * progress).cos())
}
