//! Minimal differentiable classifier: `linear -> BatchNorm -> ReLU` blocks
//! followed by a linear softmax head, with hand-written backprop.

mod classifier;
mod loss;
mod matrix;
mod optim;
mod params;
mod wire;

pub use classifier::{Architecture, Classifier, ForwardPass, Mode};
pub use loss::{
    cross_entropy_grad, cross_entropy_loss, kl_divergence, validate_simplex, weighted_kd_grad,
    weighted_kd_loss, weighted_kd_batch_loss, KL_EPSILON, SIMPLEX_TOLERANCE,
};
pub use matrix::Matrix;
pub use optim::{cosine_lr, Sgd, DEFAULT_MOMENTUM};
pub use params::{aggregate_params, BatchNormParams, Layer, LayerKind, LinearParams, ModelParams, Scalar};
pub use wire::{decode, encode, encoded_len, MAGIC, WIRE_VERSION};

use crate::error::{Error, Result};

/// Misclassification rate of `model` under the argmax decision rule.
pub fn empirical_task_risk(model: &Classifier, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if inputs.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "labels",
            expected: inputs.rows(),
            found: labels.len(),
        });
    }
    let predicted = model.predict(inputs)?;
    let wrong = predicted
        .iter()
        .zip(labels)
        .filter(|(p, y)| p != y)
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
