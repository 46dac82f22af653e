//! Knowledge vote: turns teacher predictions on one target sample into a
//! consensus distribution `p` and a support count `n_p`.
//!
//! 1. Confidence gate: keep teachers whose top probability is at least `g`.
//! 2. Class vote: sum the surviving rows, pick the consensus class, drop
//!    survivors whose own argmax disagrees.
//! 3. Mean ensemble over the supporters; `n_p` is their count. When the gate
//!    removes every teacher, `p` is the mean of all rows and `n_p = 0.001`.
//!
//! Rows are always summed in a canonical (lexicographic) order so the result
//! does not depend on teacher order, bit for bit.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::nn::{argmax, validate_simplex, Classifier, Matrix};
use crate::synth::UnlabeledDataset;

/// Support weight given to samples on which no teacher passes the gate.
pub const FALLBACK_SUPPORT: f64 = 0.001;

/// Predictions of every teacher for a single target sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPredictions {
    rows: Vec<Vec<f64>>,
    teacher_ids: Vec<usize>,
}

impl TeacherPredictions {
    /// Rows are teacher outputs, ids default to `0..K`.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let ids = (0..rows.len()).collect();
        Self::with_ids(rows, ids)
    }

    pub fn with_ids(rows: Vec<Vec<f64>>, teacher_ids: Vec<usize>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::TooFewSources {
                required: 1,
                found: 0,
            });
        }
        if teacher_ids.len() != rows.len() {
            return Err(Error::DimensionMismatch {
                context: "teacher ids",
                expected: rows.len(),
                found: teacher_ids.len(),
            });
        }
        let classes = rows[0].len();
        for row in &rows {
            if row.len() != classes {
                return Err(Error::DimensionMismatch {
                    context: "teacher prediction",
                    expected: classes,
                    found: row.len(),
                });
            }
            validate_simplex(row)?;
        }
        Ok(Self { rows, teacher_ids })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn teacher_ids(&self) -> &[usize] {
        &self.teacher_ids
    }

    pub fn num_classes(&self) -> usize {
        self.rows[0].len()
    }

    /// Sum of the selected rows, accumulated in canonical row order.
    fn canonical_sum(&self, indices: &[usize]) -> Vec<f64> {
        let mut order = indices.to_vec();
        order.sort_by(|&a, &b| lexicographic(&self.rows[a], &self.rows[b]));
        let mut sum = vec![0.0; self.num_classes()];
        for i in order {
            for (s, v) in sum.iter_mut().zip(&self.rows[i]) {
                *s += v;
            }
        }
        sum
    }

    fn mean_of(&self, indices: &[usize]) -> Vec<f64> {
        let n = indices.len() as f64;
        let mut p = self.canonical_sum(indices);
        p.iter_mut().for_each(|v| *v /= n);
        p
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// One element of the extended source domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusItem {
    /// Consensus class distribution.
    pub p: Vec<f64>,
    /// Support count `n_p`: number of agreeing confident teachers, or
    /// [`FALLBACK_SUPPORT`].
    pub support: f64,
    pub consensus_class: usize,
}

impl ConsensusItem {
    pub fn new(p: Vec<f64>, support: f64) -> Result<Self> {
        validate_simplex(&p)?;
        if !(support > 0.0 && support.is_finite()) {
            return Err(Error::InvalidConfig(format!("support count {support} must be positive")));
        }
        let consensus_class = argmax(&p);
        Ok(Self {
            p,
            support,
            consensus_class,
        })
    }

    pub fn is_fallback(&self) -> bool {
        self.support == FALLBACK_SUPPORT
    }

    /// Per-sample consensus quality `n_p * max(p)`.
    pub fn quality(&self) -> f64 {
        self.support * self.p[self.consensus_class]
    }
}

/// Teachers (as indices into `preds`) whose top probability is `>= gate`.
pub fn confidence_gate(preds: &TeacherPredictions, gate: f64) -> Vec<usize> {
    preds
        .rows
        .iter()
        .enumerate()
        .filter(|(_, row)| row.iter().copied().fold(f64::NEG_INFINITY, f64::max) >= gate)
        .map(|(i, _)| i)
        .collect()
}

/// Consensus class of the survivors and the survivors that agree with it.
///
/// The class is the argmax of the summed survivor rows, ties to the lowest
/// index. The candidates are restricted to classes that at least one
/// survivor predicts, so the supporter set is never empty.
pub fn consensus_class_vote(preds: &TeacherPredictions, survivors: &[usize]) -> Result<(usize, Vec<usize>)> {
    if survivors.is_empty() {
        return Err(Error::NoSurvivors);
    }
    let sums = preds.canonical_sum(survivors);
    let own: Vec<usize> = survivors.iter().map(|&i| argmax(&preds.rows[i])).collect();
    let mut class = None::<usize>;
    for c in 0..sums.len() {
        if !own.contains(&c) {
            continue;
        }
        if class.is_none_or(|best| sums[c] > sums[best]) {
            class = Some(c);
        }
    }
    let class = class.expect("every survivor predicts some class");
    let mut supporters: Vec<usize> = survivors
        .iter()
        .zip(&own)
        .filter(|(_, &c)| c == class)
        .map(|(&i, _)| i)
        .collect();
    supporters.sort_unstable();
    Ok((class, supporters))
}

/// The full three-step vote for one sample.
pub fn knowledge_vote(preds: &TeacherPredictions, gate: f64) -> ConsensusItem {
    let survivors = confidence_gate(preds, gate);
    if survivors.is_empty() {
        let all: Vec<usize> = (0..preds.rows.len()).collect();
        let p = preds.mean_of(&all);
        let consensus_class = argmax(&p);
        return ConsensusItem {
            p,
            support: FALLBACK_SUPPORT,
            consensus_class,
        };
    }
    let (class, supporters) =
        consensus_class_vote(preds, &survivors).expect("survivor set is nonempty");
    ConsensusItem {
        p: preds.mean_of(&supporters),
        support: supporters.len() as f64,
        consensus_class: class,
    }
}

/// Runs the vote on every row, given per-teacher probability matrices with
/// one row per target sample.
pub fn vote_on_predictions(teacher_probs: &[&Matrix], gate: f64) -> Result<Vec<ConsensusItem>> {
    let first = teacher_probs.first().ok_or(Error::TooFewSources {
        required: 1,
        found: 0,
    })?;
    for m in teacher_probs {
        if m.rows() != first.rows() || m.cols() != first.cols() {
            return Err(Error::DimensionMismatch {
                context: "teacher prediction matrix",
                expected: first.rows() * first.cols(),
                found: m.rows() * m.cols(),
            });
        }
    }
    (0..first.rows())
        .map(|i| {
            let rows = teacher_probs.iter().map(|m| m.row(i).to_vec()).collect();
            TeacherPredictions::new(rows).map(|preds| knowledge_vote(&preds, gate))
        })
        .collect()
}

/// The extra source domain built on the target: the target's own inputs
/// (borrowed, never copied) paired with consensus items.
#[derive(Debug, Clone)]
pub struct ExtendedDomain<'a> {
    pub inputs: &'a Matrix,
    pub items: Vec<ConsensusItem>,
}

impl ExtendedDomain<'_> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Fraction of samples that fell back to the low-weight branch.
    pub fn fallback_fraction(&self) -> f64 {
        if self.items.is_empty() {
            return 0.0;
        }
        self.items.iter().filter(|i| i.is_fallback()).count() as f64 / self.items.len() as f64
    }
}

/// Eval-mode predictions of every teacher on the target inputs.
pub fn teacher_outputs(target: &UnlabeledDataset, teachers: &[Classifier]) -> Result<Vec<Matrix>> {
    teachers
        .iter()
        .map(|t| t.predict_proba(target.inputs()))
        .collect()
}

pub fn build_extended_domain<'a>(
    target: &'a UnlabeledDataset,
    teachers: &[Classifier],
    gate: f64,
) -> Result<ExtendedDomain<'a>> {
    let outputs = teacher_outputs(target, teachers)?;
    extended_domain_from_outputs(target, &outputs, gate)
}

/// Same as [`build_extended_domain`] when teacher outputs are already known.
pub fn extended_domain_from_outputs<'a>(
    target: &'a UnlabeledDataset,
    outputs: &[Matrix],
    gate: f64,
) -> Result<ExtendedDomain<'a>> {
    let refs: Vec<&Matrix> = outputs.iter().collect();
    let items = vote_on_predictions(&refs, gate)?;
    if items.len() != target.len() {
        return Err(Error::DimensionMismatch {
            context: "teacher outputs",
            expected: target.len(),
            found: items.len(),
        });
    }
    Ok(ExtendedDomain {
        inputs: target.inputs(),
        items,
    })
}
