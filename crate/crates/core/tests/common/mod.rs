#![allow(dead_code)]

use kd3a_core::nn::{Classifier, Matrix, ModelParams};
use kd3a_core::rng::Rng;
use rand::Rng as _;

/// Brute-force vote result for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleVote {
    pub p: Vec<f64>,
    pub support: f64,
}

fn first_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for c in 1..row.len() {
        if row[c] > row[best] {
            best = c;
        }
    }
    best
}

/// Gate, class vote, mean ensemble written out longhand. Rows are summed in
/// input order, so callers comparing bit-for-bit must use exactly
/// representable values.
pub fn oracle_vote(rows: &[Vec<f64>], gate: f64) -> OracleVote {
    let classes = rows[0].len();
    let mut survivors = Vec::new();
    for (k, row) in rows.iter().enumerate() {
        let top = row.iter().cloned().fold(f64::MIN, f64::max);
        if top >= gate {
            survivors.push(k);
        }
    }
    if survivors.is_empty() {
        let mut p = vec![0.0; classes];
        for row in rows {
            for c in 0..classes {
                p[c] += row[c];
            }
        }
        for v in &mut p {
            *v /= rows.len() as f64;
        }
        return OracleVote { p, support: 0.001 };
    }
    let mut summed = vec![0.0; classes];
    for &k in &survivors {
        for c in 0..classes {
            summed[c] += rows[k][c];
        }
    }
    let mut class = usize::MAX;
    for c in 0..classes {
        let predicted = survivors.iter().any(|&k| first_argmax(&rows[k]) == c);
        if predicted && (class == usize::MAX || summed[c] > summed[class]) {
            class = c;
        }
    }
    let supporters: Vec<usize> = survivors
        .into_iter()
        .filter(|&k| first_argmax(&rows[k]) == class)
        .collect();
    let mut p = vec![0.0; classes];
    for &k in &supporters {
        for c in 0..classes {
            p[c] += rows[k][c];
        }
    }
    for v in &mut p {
        *v /= supporters.len() as f64;
    }
    OracleVote {
        p,
        support: supporters.len() as f64,
    }
}

/// `sum_i n_p * max p` over the samples, using only the teachers in `members`.
pub fn oracle_quality(outputs: &[Matrix], members: &[usize], gate: f64) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    let n = outputs[0].rows();
    let mut q = 0.0;
    for i in 0..n {
        let rows: Vec<Vec<f64>> = members.iter().map(|&k| outputs[k].row(i).to_vec()).collect();
        let vote = oracle_vote(&rows, gate);
        let top = vote.p.iter().cloned().fold(f64::MIN, f64::max);
        q += vote.support * top;
    }
    q
}

/// Leave-one-out contributions and the resulting weights over K + 1 slots.
pub fn oracle_cf_alpha(outputs: &[Matrix], gate: f64, sizes: &[usize], target: usize) -> (Vec<f64>, Vec<f64>) {
    let k = outputs.len();
    let everyone: Vec<usize> = (0..k).collect();
    let full = oracle_quality(outputs, &everyone, gate);
    let cf: Vec<f64> = (0..k)
        .map(|drop| {
            let rest: Vec<usize> = (0..k).filter(|&j| j != drop).collect();
            full - oracle_quality(outputs, &rest, gate)
        })
        .collect();
    let total_n = sizes.iter().sum::<usize>() as f64 + target as f64;
    let ext = target as f64 / total_n;
    let scores: Vec<f64> = sizes.iter().zip(&cf).map(|(&n, &c)| n as f64 * c.max(0.0)).collect();
    let denom: f64 = scores.iter().sum();
    let mut alpha: Vec<f64> = if denom > 0.0 {
        scores.iter().map(|s| (1.0 - ext) * s / denom).collect()
    } else {
        sizes.iter().map(|&n| n as f64 / total_n).collect()
    };
    alpha.push(ext);
    (cf, alpha)
}

/// Point on the probability simplex with exponential weights.
pub fn random_simplex(classes: usize, rng: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..classes).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Simplex point whose entries are multiples of 1/64, sharp about half the
/// time.
pub fn dyadic_simplex(classes: usize, rng: &mut Rng) -> Vec<f64> {
    let mut units = vec![0u32; classes];
    if rng.random_bool(0.5) {
        let top = rng.random_range(0..classes);
        let mass = rng.random_range(56..=64u32);
        units[top] = mass;
        for _ in 0..(64 - mass) {
            units[rng.random_range(0..classes)] += 1;
        }
    } else {
        for _ in 0..64 {
            units[rng.random_range(0..classes)] += 1;
        }
    }
    units.into_iter().map(|u| f64::from(u) / 64.0).collect()
}

/// Random matrix whose rows lie on the simplex.
pub fn simplex_matrix(rows: usize, classes: usize, rng: &mut Rng) -> Matrix {
    let data: Vec<Vec<f64>> = (0..rows).map(|_| random_simplex(classes, rng)).collect();
    Matrix::from_rows(&data).unwrap()
}

pub fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * normal(rng)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn normal(rng: &mut Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Trainable values in manifest order.
pub fn trainable(params: &ModelParams<f64>) -> Vec<f64> {
    params
        .tensors()
        .into_iter()
        .filter(|(_, t)| *t)
        .flat_map(|(v, _)| v.to_vec())
        .collect()
}

/// Central differences of `loss` with respect to every trainable value.
pub fn fd_params(model: &Classifier, h: f64, mut loss: impl FnMut(&mut Classifier) -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    let slots: Vec<(usize, usize)> = model
        .params()
        .tensors()
        .into_iter()
        .enumerate()
        .filter(|(_, (_, t))| *t)
        .flat_map(|(ti, (v, _))| (0..v.len()).map(move |j| (ti, j)))
        .collect();
    for (ti, j) in slots {
        let mut plus = model.clone();
        plus.params_mut().tensors_mut()[ti].0[j] += h;
        let mut minus = model.clone();
        minus.params_mut().tensors_mut()[ti].0[j] -= h;
        out.push((loss(&mut plus) - loss(&mut minus)) / (2.0 * h));
    }
    out
}

/// `|a - b| / max(|a|, |b|)` on whole vectors, with a floor for all-zero
/// gradients.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-10)
}
