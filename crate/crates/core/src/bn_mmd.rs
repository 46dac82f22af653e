//! BatchNorm moment matching.
//!
//! Every BatchNorm layer stores `E[pi]` and `Var[pi]` of its input feature,
//! which gives the first and second moments without touching data
//! (`E[pi^2] = Var[pi] + E[pi]^2`). With the quadratic kernel the MMD between
//! two domains at layer `l` is
//! `|E1_a - E1_b|^2 + |E2_a - E2_b|^2`. The weighted objective over K + 1
//! sources has a closed-form minimizer: the `alpha`-weighted average of the
//! source moments.

use crate::error::{Error, Result};
use crate::focus::DomainWeights;
use crate::nn::{Matrix, ModelParams, Scalar};

/// First and second moments of one BatchNorm input feature, per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMoments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl LayerMoments {
    pub fn channels(&self) -> usize {
        self.first.len()
    }

    /// Moments of a feature batch, estimated by the batch mean.
    pub fn of_batch(features: &Matrix) -> Self {
        Self {
            first: features.column_means(),
            second: features.column_second_moments(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub layers: Vec<LayerMoments>,
}

/// Moments stored in the BatchNorm running statistics of `params`.
pub fn extract_bn_stats<T: Scalar>(params: &ModelParams<T>) -> Result<BnStats> {
    let layers: Vec<LayerMoments> = params
        .batch_norms()
        .map(|bn| {
            let first: Vec<f64> = bn.running_mean.iter().map(|v| v.to_f64()).collect();
            let second = bn
                .running_var
                .iter()
                .zip(&first)
                .map(|(var, mean)| var.to_f64().max(0.0) + mean * mean)
                .collect();
            LayerMoments { first, second }
        })
        .collect();
    if layers.is_empty() {
        return Err(Error::NoBatchNorm);
    }
    Ok(BnStats { layers })
}

/// Quadratic-kernel MMD between two moment pairs of the same layer.
pub fn quadratic_mmd_distance(a: &LayerMoments, b: &LayerMoments) -> Result<f64> {
    check_channels(a, b)?;
    let d1: f64 = a.first.iter().zip(&b.first).map(|(x, y)| (x - y).powi(2)).sum();
    let d2: f64 = a.second.iter().zip(&b.second).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(d1 + d2)
}

/// Weighted objective `sum_l sum_k alpha_k MMD(target_l, source_k_l)` as a
/// function of the target moments.
pub fn bn_mmd_objective(target: &[LayerMoments], sources: &[BnStats], weights: &DomainWeights) -> Result<f64> {
    check_sources(target.len(), sources, weights)?;
    let mut total = 0.0;
    for (l, t) in target.iter().enumerate() {
        for (stats, &alpha) in sources.iter().zip(weights.as_slice()) {
            total += alpha * quadratic_mmd_distance(t, &stats.layers[l])?;
        }
    }
    Ok(total)
}

/// Mini-batch loss where target moments are batch means of the BatchNorm
/// input features, with its gradient with respect to those features.
pub fn bn_mmd_loss(
    features: &[Matrix],
    sources: &[BnStats],
    weights: &DomainWeights,
) -> Result<(f64, Vec<Matrix>)> {
    check_sources(features.len(), sources, weights)?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(features.len());
    for (l, feat) in features.iter().enumerate() {
        if feat.rows() < 2 {
            return Err(Error::BatchTooSmall(feat.rows()));
        }
        let batch = LayerMoments::of_batch(feat);
        let c = batch.channels();
        // dL/dmu1 and dL/dmu2 per channel
        let mut g1 = vec![0.0; c];
        let mut g2 = vec![0.0; c];
        for (stats, &alpha) in sources.iter().zip(weights.as_slice()) {
            let src = &stats.layers[l];
            check_channels(&batch, src)?;
            total += alpha * quadratic_mmd_distance(&batch, src)?;
            for j in 0..c {
                g1[j] += 2.0 * alpha * (batch.first[j] - src.first[j]);
                g2[j] += 2.0 * alpha * (batch.second[j] - src.second[j]);
            }
        }
        let n = feat.rows() as f64;
        let mut grad = Matrix::zeros(feat.rows(), c);
        for i in 0..feat.rows() {
            let x = feat.row(i);
            for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
                *g = (g1[j] + 2.0 * x[j] * g2[j]) / n;
            }
        }
        grads.push(grad);
    }
    Ok((total, grads))
}

/// Weighted-average moments, the minimizer of [`bn_mmd_objective`].
pub fn closed_form_moments(sources: &[BnStats], weights: &DomainWeights) -> Result<BnStats> {
    let first = sources.first().ok_or(Error::NoBatchNorm)?;
    check_sources(first.layers.len(), sources, weights)?;
    let layers = (0..first.layers.len())
        .map(|l| {
            let c = first.layers[l].channels();
            let mut m = LayerMoments {
                first: vec![0.0; c],
                second: vec![0.0; c],
            };
            for (stats, &alpha) in sources.iter().zip(weights.as_slice()) {
                let src = &stats.layers[l];
                check_channels(&m, src)?;
                for j in 0..c {
                    m.first[j] += alpha * src.first[j];
                    m.second[j] += alpha * src.second[j];
                }
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BnStats { layers })
}

/// Writes `moments` into the running statistics of `target`:
/// `running_mean = E1`, `running_var = max(E2 - E1^2, 0)`.
pub fn apply_bn_stats<T: Scalar>(target: &mut ModelParams<T>, moments: &BnStats) -> Result<()> {
    let count = target.batch_norms().count();
    if count == 0 {
        return Err(Error::NoBatchNorm);
    }
    if count != moments.layers.len() {
        return Err(Error::ManifestMismatch);
    }
    for (bn, m) in target.batch_norms_mut().zip(&moments.layers) {
        if bn.channels() != m.channels() {
            return Err(Error::ManifestMismatch);
        }
        for j in 0..m.channels() {
            bn.running_mean[j] = T::from_f64(m.first[j]);
            bn.running_var[j] = T::from_f64((m.second[j] - m.first[j] * m.first[j]).max(0.0));
        }
    }
    Ok(())
}

/// Replaces the BatchNorm statistics of `target` with the closed-form
/// optimum over `sources` (K + 1 models, one weight each).
pub fn closed_form_bn_update<T: Scalar>(
    target: &mut ModelParams<T>,
    sources: &[&ModelParams<T>],
    weights: &DomainWeights,
) -> Result<BnStats> {
    if sources.iter().any(|s| !s.same_manifest(target)) {
        return Err(Error::ManifestMismatch);
    }
    let stats = sources
        .iter()
        .map(|s| extract_bn_stats(*s))
        .collect::<Result<Vec<_>>>()?;
    let optimum = closed_form_moments(&stats, weights)?;
    apply_bn_stats(target, &optimum)?;
    Ok(optimum)
}

fn check_channels(a: &LayerMoments, b: &LayerMoments) -> Result<()> {
    if a.channels() != b.channels() || a.second.len() != b.second.len() {
        return Err(Error::DimensionMismatch {
            context: "BatchNorm channels",
            expected: a.channels(),
            found: b.channels(),
        });
    }
    Ok(())
}

fn check_sources(layers: usize, sources: &[BnStats], weights: &DomainWeights) -> Result<()> {
    if sources.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            context: "BN-MMD source weights",
            expected: sources.len(),
            found: weights.len(),
        });
    }
    if let Some(bad) = sources.iter().find(|s| s.layers.len() != layers) {
        return Err(Error::DimensionMismatch {
            context: "BatchNorm layer count",
            expected: layers,
            found: bad.layers.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BatchNormParams, Layer};

    fn bn_model(mean: f32, var: f32) -> ModelParams<f32> {
        ModelParams::new(vec![Layer::BatchNorm(BatchNormParams {
            gamma: vec![1.0],
            beta: vec![0.0],
            running_mean: vec![mean],
            running_var: vec![var],
        })])
        .unwrap()
    }

    fn scalar(first: f64, second: f64) -> LayerMoments {
        LayerMoments {
            first: vec![first],
            second: vec![second],
        }
    }

    #[test]
    fn extraction_examples() {
        let s = extract_bn_stats(&bn_model(0.0, 1.0)).unwrap();
        assert_eq!(s.layers[0], scalar(0.0, 1.0));
        let s = extract_bn_stats(&bn_model(2.0, 3.0)).unwrap();
        assert_eq!(s.layers[0], scalar(2.0, 7.0));
        let linear_only = crate::nn::ModelParams::<f32>::new(vec![]).unwrap();
        assert!(matches!(extract_bn_stats(&linear_only), Err(Error::NoBatchNorm)));
    }

    #[test]
    fn distance_examples() {
        let a = scalar(1.0, 2.0);
        let b = scalar(3.0, 10.0);
        assert_eq!(quadratic_mmd_distance(&a, &b).unwrap(), 68.0);
        assert_eq!(quadratic_mmd_distance(&b, &a).unwrap(), 68.0);
        assert_eq!(quadratic_mmd_distance(&a, &a).unwrap(), 0.0);
        let wide = LayerMoments {
            first: vec![0.0, 0.0],
            second: vec![0.0, 0.0],
        };
        assert!(quadratic_mmd_distance(&a, &wide).is_err());
    }

    #[test]
    fn closed_form_examples() {
        let a = bn_model(1.0, 1.0);
        let b = bn_model(3.0, 1.0);
        let mut target = bn_model(0.0, 1.0);
        let w = DomainWeights::new(vec![0.5, 0.5]).unwrap();
        let opt = closed_form_bn_update(&mut target, &[&a, &b], &w).unwrap();
        assert_eq!(opt.layers[0].first, vec![2.0]);
        // E2 = 0.5 * (2 + 10) = 6, var = 6 - 4 = 2
        let bn = target.batch_norms().next().unwrap();
        assert_eq!((bn.running_mean[0], bn.running_var[0]), (2.0, 2.0));

        let one_hot = DomainWeights::new(vec![0.0, 1.0]).unwrap();
        closed_form_bn_update(&mut target, &[&a, &b], &one_hot).unwrap();
        assert_eq!(target, b);
    }

    #[test]
    fn loss_vanishes_at_matching_moments() {
        let feat = Matrix::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let batch = LayerMoments::of_batch(&feat);
        let stats = BnStats {
            layers: vec![batch.clone()],
        };
        let w = DomainWeights::new(vec![0.3, 0.7]).unwrap();
        let (loss, grads) = bn_mmd_loss(&[feat.clone()], &[stats.clone(), stats.clone()], &w).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads[0].data().iter().all(|g| *g == 0.0));

        let single = DomainWeights::new(vec![1.0]).unwrap();
        let other = BnStats {
            layers: vec![scalar(0.0, 1.0)],
        };
        let (loss, _) = bn_mmd_loss(&[feat.clone()], &[other.clone()], &single).unwrap();
        assert_eq!(loss, quadratic_mmd_distance(&batch, &other.layers[0]).unwrap());

        let tiny = Matrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(matches!(
            bn_mmd_loss(&[tiny], &[other], &single),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn variance_reconstruction_is_clamped() {
        let mut target = bn_model(0.0, 1.0);
        let moments = BnStats {
            layers: vec![scalar(2.0, 4.0 - 1e-12)],
        };
        apply_bn_stats(&mut target, &moments).unwrap();
        assert_eq!(target.batch_norms().next().unwrap().running_var[0], 0.0);
    }
}
