use std::f64::consts::PI;

use super::params::ModelParams;
use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// SGD with heavy-ball momentum: `v <- momentum * v + g`, `w <- w - lr * v`.
/// Only trainable tensors are touched; running statistics pass through.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Option<ModelParams<f64>>,
}

impl Default for Sgd {
    fn default() -> Self {
        Self::new(DEFAULT_MOMENTUM)
    }
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<f64>, grads: &ModelParams<f64>, lr: f64) -> Result<()> {
        if !params.same_manifest(grads) {
            return Err(Error::ManifestMismatch);
        }
        let velocity = match &mut self.velocity {
            Some(v) if v.same_manifest(params) => v,
            slot => slot.insert(params.zeros_like()),
        };
        for (((p, trainable), (v, _)), (g, _)) in params
            .tensors_mut()
            .into_iter()
            .zip(velocity.tensors_mut())
            .zip(grads.tensors())
        {
            if !trainable {
                continue;
            }
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr_hi` at epoch 0 to `lr_lo` at `total_epochs`.
pub fn cosine_lr(epoch: f64, total_epochs: f64, lr_hi: f64, lr_lo: f64) -> f64 {
    if total_epochs <= 0.0 {
        return lr_lo;
    }
    let progress = (epoch / total_epochs).clamp(0.0, 1.0);
    lr_lo + 0.5 * (lr_hi - lr_lo) * (1.0 + (PI * progress).cos())
}
