//! Cosine learning-rate schedule with linear warmup.

/// Linear ramp 0 -> `base_lr` over `warmup_steps`, then cosine decay to 0 at
/// `total_steps`.
pub fn cosine_warmup_lr(step: usize, base_lr: f64, warmup_steps: usize, total_steps: usize) -> f64 {
    debug_assert!(step <= total_steps);
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
}
