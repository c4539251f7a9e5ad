//! SGD with momentum and the epoch-level cosine schedule.

use crate::error::{Error, Result};

/// Cosine decay from `base_lr` at epoch 0 to `min_lr` at the last epoch.
pub fn cosine_lr(epoch: usize, epochs: usize, base_lr: f64, min_lr: f64) -> Result<f64> {
    if epoch >= epochs {
        return Err(Error::Usage(format!("epoch {epoch} outside 0..{epochs}")));
    }
    if epochs == 1 {
        return Ok(base_lr);
    }
    if epoch == epochs - 1 {
        return Ok(min_lr);
    }
    let progress = epoch as f64 / (epochs - 1) as f64;
    Ok(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// One in-place update: `g' = g + wd·w`, `v ← μ·v + g'`, `w ← w − lr·v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    debug_assert!(params.len() == grads.len() && grads.len() == velocity.len());
    for ((w, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *w;
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
}
