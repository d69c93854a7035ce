//! Cosine learning-rate schedule with linear warmup.

use std::f64::consts::PI;

/// Learning rate at `step` of `total_steps`: linear warmup from 0 to
/// `base_lr` over ceil(warmup_ratio * total_steps) steps, then cosine
/// decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64, warmup_ratio: f64) -> f64 {
    assert!(step <= total_steps, "step {step} beyond total {total_steps}");
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
    if step <= warmup && warmup > 0 {
        return base_lr * step as f64 / warmup as f64;
    }
    let decay_span = total_steps - warmup;
    if decay_span == 0 {
        return if step < total_steps { base_lr } else { 0.0 };
    }
    let progress = (step - warmup) as f64 / decay_span as f64;
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}
