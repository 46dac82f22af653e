use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::vote::ConsensusItem;

/// Lower clamp applied to probabilities inside logarithms.
pub const KL_EPSILON: f64 = 1e-8;
/// Allowed deviation of a probability vector's sum from 1.
pub const SIMPLEX_TOLERANCE: f64 = 1e-4;

pub fn validate_simplex(v: &[f64]) -> Result<()> {
    let sum: f64 = v.iter().sum();
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    if v.is_empty() || !sum.is_finite() || min < 0.0 || (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::NotOnSimplex { sum, min });
    }
    Ok(())
}

/// `KL(p || q)` with `q` clamped below by [`KL_EPSILON`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            context: "kl_divergence",
            expected: p.len(),
            found: q.len(),
        });
    }
    validate_simplex(p)?;
    validate_simplex(q)?;
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pc, _)| pc > 0.0)
        .map(|(&pc, &qc)| pc * (pc.ln() - qc.max(KL_EPSILON).ln()))
        .sum();
    // Clamping q can push the sum a hair below zero.
    Ok(kl.max(0.0))
}

/// Knowledge-vote loss for one sample: `n_p * KL(p || q)`.
pub fn weighted_kd_loss(item: &ConsensusItem, q: &[f64]) -> Result<f64> {
    Ok(item.support * kl_divergence(&item.p, q)?)
}

/// Batch mean of [`weighted_kd_loss`] over rows of `probs`.
pub fn weighted_kd_batch_loss(items: &[ConsensusItem], probs: &Matrix) -> Result<f64> {
    check_rows("consensus items", probs, items.len())?;
    let mut total = 0.0;
    for (item, q) in items.iter().zip(probs.iter_rows()) {
        total += weighted_kd_loss(item, q)?;
    }
    Ok(total / items.len() as f64)
}

/// Gradient of [`weighted_kd_batch_loss`] with respect to the head logits.
pub fn weighted_kd_grad(items: &[ConsensusItem], probs: &Matrix) -> Result<Matrix> {
    check_rows("consensus items", probs, items.len())?;
    let n = items.len() as f64;
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    for (i, item) in items.iter().enumerate() {
        if item.p.len() != probs.cols() {
            return Err(Error::DimensionMismatch {
                context: "consensus item classes",
                expected: probs.cols(),
                found: item.p.len(),
            });
        }
        let p_mass: f64 = item.p.iter().sum();
        let q = probs.row(i);
        for ((g, &qc), &pc) in grad.row_mut(i).iter_mut().zip(q).zip(&item.p) {
            *g = item.support * (qc * p_mass - pc) / n;
        }
    }
    Ok(grad)
}

/// Mean negative log-likelihood of `labels` under `probs`.
pub fn cross_entropy_loss(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.get(i, y).max(KL_EPSILON).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Gradient of [`cross_entropy_loss`] with respect to the head logits.
pub fn cross_entropy_grad(probs: &Matrix, labels: &[usize]) -> Result<Matrix> {
    check_labels(probs, labels)?;
    let n = labels.len() as f64;
    let mut grad = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        let row = grad.row_mut(i);
        row[y] -= 1.0;
        row.iter_mut().for_each(|g| *g /= n);
    }
    Ok(grad)
}

fn check_rows(context: &'static str, probs: &Matrix, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if probs.rows() != n {
        return Err(Error::DimensionMismatch {
            context,
            expected: probs.rows(),
            found: n,
        });
    }
    Ok(())
}

fn check_labels(probs: &Matrix, labels: &[usize]) -> Result<()> {
    check_rows("labels", probs, labels.len())?;
    if let Some(&label) = labels.iter().find(|&&y| y >= probs.cols()) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: probs.cols(),
        });
    }
    Ok(())
}
