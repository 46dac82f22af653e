//! Consensus focus: leave-one-out contribution of each source to the total
//! consensus quality, and the domain weights derived from it. Baseline
//! weighting strategies live here too for comparison runs.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::{Classifier, Matrix};
use crate::rng::rng_from_seed;
use crate::synth::UnlabeledDataset;
use crate::vote::{teacher_outputs, vote_on_predictions};

/// Weights over the K sources plus the extended (consensus) domain in the
/// last slot.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainWeights {
    alpha: Vec<f64>,
}

impl DomainWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        let sum: f64 = alpha.iter().sum();
        if alpha.is_empty() || alpha.iter().any(|a| !a.is_finite() || *a < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidWeights { sum });
        }
        Ok(Self { alpha })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// Weight of the extended domain.
    pub fn extended(&self) -> f64 {
        *self.alpha.last().expect("weights are nonempty")
    }

    pub fn sources(&self) -> &[f64] {
        &self.alpha[..self.alpha.len() - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfReport {
    /// `Q(S)` over all sources.
    pub q_full: f64,
    /// `Q(S \ {k})` for each source.
    pub q_leave_one_out: Vec<f64>,
    /// `q_full - q_leave_one_out[k]`, may be negative.
    pub cf_raw: Vec<f64>,
    /// `max(cf_raw, 0)`, the values that enter the weights.
    pub cf_clamped: Vec<f64>,
}

/// `Q = sum_i n_p * max(p)` of the knowledge vote restricted to `coalition`
/// (indices into `outputs`). The empty coalition has quality 0.
pub fn consensus_quality(coalition: &[usize], outputs: &[Matrix], gate: f64) -> Result<f64> {
    if coalition.is_empty() {
        return Ok(0.0);
    }
    let members = coalition
        .iter()
        .map(|&k| {
            outputs.get(k).ok_or(Error::DimensionMismatch {
                context: "coalition member",
                expected: outputs.len(),
                found: k,
            })
        })
        .collect::<Result<Vec<&Matrix>>>()?;
    if members[0].rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let items = vote_on_predictions(&members, gate)?;
    Ok(items.iter().map(|item| item.quality()).sum())
}

/// Consensus quality of classifier teachers on the target inputs.
pub fn consensus_quality_of(
    coalition: &[&Classifier],
    target: &UnlabeledDataset,
    gate: f64,
) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let outputs = coalition
        .iter()
        .map(|t| t.predict_proba(target.inputs()))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<usize> = (0..outputs.len()).collect();
    consensus_quality(&all, &outputs, gate)
}

/// CF values from precomputed teacher outputs: exactly `K + 1` quality
/// evaluations (full set and every leave-one-out coalition).
pub fn cf_values(outputs: &[Matrix], gate: f64) -> Result<CfReport> {
    let k = outputs.len();
    if k < 2 {
        return Err(Error::TooFewSources { required: 2, found: k });
    }
    let all: Vec<usize> = (0..k).collect();
    let q_full = consensus_quality(&all, outputs, gate)?;
    let q_leave_one_out = (0..k)
        .map(|drop| {
            let rest: Vec<usize> = all.iter().copied().filter(|&i| i != drop).collect();
            consensus_quality(&rest, outputs, gate)
        })
        .collect::<Result<Vec<_>>>()?;
    let cf_raw: Vec<f64> = q_leave_one_out.iter().map(|q| q_full - q).collect();
    let cf_clamped = cf_raw.iter().map(|c| c.max(0.0)).collect();
    Ok(CfReport {
        q_full,
        q_leave_one_out,
        cf_raw,
        cf_clamped,
    })
}

pub fn cf_values_for(teachers: &[Classifier], target: &UnlabeledDataset, gate: f64) -> Result<CfReport> {
    cf_values(&teacher_outputs(target, teachers)?, gate)
}

/// Weight of the extended domain, proportional to its share of the data.
pub fn extended_domain_weight(source_sizes: &[usize], target_size: usize) -> f64 {
    let total: usize = source_sizes.iter().sum::<usize>() + target_size;
    if total == 0 {
        0.0
    } else {
        target_size as f64 / total as f64
    }
}

/// Consensus-focus weights. The extended slot gets
/// `N_T / (sum N_k + N_T)`; sources share the rest in proportion to
/// `N_k * max(CF_k, 0)`. If every clamped CF is zero the sources fall back
/// to data-size weights; the second return value reports that.
pub fn domain_weights_cf(
    report: &CfReport,
    source_sizes: &[usize],
    target_size: usize,
) -> Result<(DomainWeights, bool)> {
    let k = report.cf_clamped.len();
    if source_sizes.len() != k {
        return Err(Error::DimensionMismatch {
            context: "source sizes",
            expected: k,
            found: source_sizes.len(),
        });
    }
    let ext = extended_domain_weight(source_sizes, target_size);
    let scores: Vec<f64> = source_sizes
        .iter()
        .zip(&report.cf_clamped)
        .map(|(&n, &cf)| n as f64 * cf)
        .collect();
    let total: f64 = scores.iter().sum();
    if total > 0.0 && total.is_finite() {
        let mut alpha: Vec<f64> = scores.iter().map(|s| (1.0 - ext) * s / total).collect();
        alpha.push(ext);
        Ok((DomainWeights::new(alpha)?, false))
    } else {
        Ok((datasize_weights(source_sizes, target_size)?, true))
    }
}

/// Weights proportional to data size, extended slot included.
pub fn datasize_weights(source_sizes: &[usize], target_size: usize) -> Result<DomainWeights> {
    let total: usize = source_sizes.iter().sum::<usize>() + target_size;
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut alpha: Vec<f64> = source_sizes.iter().map(|&n| n as f64 / total as f64).collect();
    alpha.push(target_size as f64 / total as f64);
    DomainWeights::new(alpha)
}

/// How the K + 1 models are weighted during aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightingStrategy {
    ConsensusFocus,
    Uniform,
    DataSize,
    /// Input-space divergence re-weighting. Needs raw source inputs, so it is
    /// only available as a simulation oracle.
    HDivergence,
}

impl WeightingStrategy {
    pub fn name(self) -> &'static str {
        match self {
            WeightingStrategy::ConsensusFocus => "cf",
            WeightingStrategy::Uniform => "uniform",
            WeightingStrategy::DataSize => "datasize",
            WeightingStrategy::HDivergence => "hdiv",
        }
    }

    /// True when computing the weights reads source data.
    pub fn breaks_decentralization(self) -> bool {
        self == WeightingStrategy::HDivergence
    }
}

impl fmt::Display for WeightingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cf" | "consensus-focus" => Ok(WeightingStrategy::ConsensusFocus),
            "uniform" => Ok(WeightingStrategy::Uniform),
            "datasize" => Ok(WeightingStrategy::DataSize),
            "hdiv" | "hdiv-proxy" => Ok(WeightingStrategy::HDivergence),
            other => Err(Error::UnknownStrategy(other.to_string())),
        }
    }
}

/// Inputs for the non-consensus weighting strategies.
#[derive(Debug, Clone, Default)]
pub struct BaselineContext {
    pub source_sizes: Vec<usize>,
    pub target_size: usize,
    /// Estimated divergence of each source from the target; required by
    /// [`WeightingStrategy::HDivergence`].
    pub divergences: Option<Vec<f64>>,
}

pub fn baseline_weights(strategy: WeightingStrategy, ctx: &BaselineContext) -> Result<DomainWeights> {
    let k = ctx.source_sizes.len();
    match strategy {
        WeightingStrategy::Uniform => DomainWeights::new(vec![1.0 / (k + 1) as f64; k + 1]),
        WeightingStrategy::DataSize => datasize_weights(&ctx.source_sizes, ctx.target_size),
        WeightingStrategy::HDivergence => {
            let d = ctx.divergences.as_ref().ok_or_else(|| {
                Error::InvalidConfig("hdiv weighting needs per-source divergence estimates".into())
            })?;
            if d.len() != k {
                return Err(Error::DimensionMismatch {
                    context: "divergence estimates",
                    expected: k,
                    found: d.len(),
                });
            }
            let ext = extended_domain_weight(&ctx.source_sizes, ctx.target_size);
            let scores: Vec<f64> = ctx
                .source_sizes
                .iter()
                .zip(d)
                .map(|(&n, &dk)| n as f64 * (-dk).exp())
                .collect();
            let total: f64 = scores.iter().sum();
            if total <= 0.0 {
                return Err(Error::EmptyDataset);
            }
            let mut alpha: Vec<f64> = scores.iter().map(|s| (1.0 - ext) * s / total).collect();
            alpha.push(ext);
            DomainWeights::new(alpha)
        }
        WeightingStrategy::ConsensusFocus => Err(Error::InvalidConfig(
            "consensus-focus weights come from domain_weights_cf".into(),
        )),
    }
}

/// Validation accuracy of a logistic domain discriminator separating `a`
/// (label 0) from `b` (label 1). Both sides are subsampled to the same size,
/// split 80/20 and standardized with training statistics.
pub fn domain_discriminator_accuracy(a: &Matrix, b: &Matrix, seed: u64) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            context: "discriminator inputs",
            expected: a.cols(),
            found: b.cols(),
        });
    }
    let n = a.rows().min(b.rows());
    if n < 5 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = rng_from_seed(seed);
    let mut pick = |m: &Matrix| {
        let mut idx: Vec<usize> = (0..m.rows()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n);
        idx
    };
    let (ia, ib) = (pick(a), pick(b));
    let mut samples: Vec<(&[f64], f64)> = ia
        .iter()
        .map(|&i| (a.row(i), 0.0))
        .chain(ib.iter().map(|&i| (b.row(i), 1.0)))
        .collect();
    samples.shuffle(&mut rng);
    let split = samples.len() * 4 / 5;
    let (train, valid) = samples.split_at(split);

    let d = a.cols();
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for (x, _) in train {
        mean.iter_mut().zip(*x).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    for (x, _) in train {
        for j in 0..d {
            sd[j] += (x[j] - mean[j]).powi(2);
        }
    }
    sd.iter_mut()
        .for_each(|s| *s = (*s / train.len() as f64).sqrt().max(1e-12));
    let standardize = |x: &[f64]| -> Vec<f64> { (0..d).map(|j| (x[j] - mean[j]) / sd[j]).collect() };
    let train_z: Vec<(Vec<f64>, f64)> = train.iter().map(|(x, y)| (standardize(x), *y)).collect();

    let mut w = vec![0.0; d];
    let mut bias = 0.0;
    let lr = 0.5;
    let l2 = 1e-4;
    for _ in 0..300 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, y) in &train_z {
            let z = bias + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - y;
            gw.iter_mut().zip(x).for_each(|(g, v)| *g += err * v);
            gb += err;
        }
        let m = train_z.len() as f64;
        for j in 0..d {
            w[j] -= lr * (gw[j] / m + l2 * w[j]);
        }
        bias -= lr * gb / m;
    }
    let correct = valid
        .iter()
        .filter(|(x, y)| {
            let x = standardize(x);
            let z = bias + w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            (z > 0.0) == (*y > 0.5)
        })
        .count();
    Ok(correct as f64 / valid.len() as f64)
}

/// A-distance proxy `2 (2 acc - 1)` of the logistic discriminator.
pub fn a_distance_proxy(a: &Matrix, b: &Matrix, seed: u64) -> Result<f64> {
    Ok(2.0 * (2.0 * domain_discriminator_accuracy(a, b, seed)? - 1.0))
}
