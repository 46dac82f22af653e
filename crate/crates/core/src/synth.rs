//! Seeded synthetic domains: Gaussian class blobs under a rotation and
//! translation shift, plus label corruption and irrelevant domains for
//! negative-transfer experiments.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{Classifier, Matrix};
use crate::rng::{rng_from_seed, Rng};

/// Covariate shift: rotation by `angle` radians in every coordinate plane
/// `(0,1), (2,3), ...` followed by a translation.
#[derive(Debug, Clone, PartialEq)]
pub struct Shift {
    pub angle: f64,
    pub translation: Vec<f64>,
}

impl Shift {
    pub fn none(input_dim: usize) -> Self {
        Self {
            angle: 0.0,
            translation: vec![0.0; input_dim],
        }
    }

    pub fn apply(&self, x: &mut [f64]) {
        let (s, c) = self.angle.sin_cos();
        for pair in x.chunks_exact_mut(2) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = c * a - s * b;
            pair[1] = s * a + c * b;
        }
        for (v, t) in x.iter_mut().zip(&self.translation) {
            *v += t;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    /// One mean per class, each of length `input_dim`.
    pub class_means: Vec<Vec<f64>>,
    /// Isotropic standard deviation of every blob.
    pub covariance_scale: f64,
    pub shift: Shift,
    pub sample_count: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.num_classes < 2 {
            return bad(format!("{} classes, at least 2 required", self.num_classes));
        }
        if self.sample_count < self.num_classes {
            return bad(format!(
                "{} samples cannot cover {} classes",
                self.sample_count, self.num_classes
            ));
        }
        if !(self.covariance_scale > 0.0 && self.covariance_scale.is_finite()) {
            return bad(format!("covariance scale {} must be positive", self.covariance_scale));
        }
        if self.input_dim == 0 {
            return bad("input dimension must be positive".into());
        }
        if self.class_means.len() != self.num_classes
            || self.class_means.iter().any(|m| m.len() != self.input_dim)
        {
            return bad("class means do not match (num_classes, input_dim)".into());
        }
        if self.shift.translation.len() != self.input_dim {
            return bad("translation length differs from input dimension".into());
        }
        if !self.shift.angle.is_finite() {
            return bad("rotation angle must be finite".into());
        }
        Ok(())
    }
}

/// Labeled samples of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if inputs.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "dataset labels",
                expected: inputs.rows(),
                found: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Writes `x_0..x_{d-1},label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let labels: Vec<i64> = self.labels.iter().map(|&y| y as i64).collect();
        write_dataset_csv(path, &self.inputs, &labels)
    }

    pub fn read_csv(path: &Path, num_classes: usize) -> Result<Self> {
        let (inputs, labels) = read_dataset_csv(path)?;
        let labels = labels
            .into_iter()
            .map(|y| {
                usize::try_from(y).map_err(|_| Error::InvalidSpec(format!("label {y} in {}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(inputs, labels, num_classes)
    }
}

/// Labels kept for evaluation only. The type exposes no accessor, so code
/// holding an [`UnlabeledDataset`] can score predictions but never read
/// the labels.
#[derive(Clone, PartialEq)]
pub struct HiddenLabels(Vec<usize>);

impl std::fmt::Debug for HiddenLabels {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "HiddenLabels({} entries)", self.0.len())
    }
}

/// Target-domain inputs. Training code sees only [`UnlabeledDataset::inputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledDataset {
    inputs: Matrix,
    hidden_labels: HiddenLabels,
}

impl UnlabeledDataset {
    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    /// Fraction of `predicted` classes matching the hidden labels.
    pub fn evaluate_predictions(&self, predicted: &[usize]) -> Result<f64> {
        if predicted.len() != self.hidden_labels.0.len() {
            return Err(Error::DimensionMismatch {
                context: "evaluation predictions",
                expected: self.hidden_labels.0.len(),
                found: predicted.len(),
            });
        }
        let correct = predicted
            .iter()
            .zip(&self.hidden_labels.0)
            .filter(|(p, y)| p == y)
            .count();
        Ok(correct as f64 / predicted.len() as f64)
    }

    /// Target accuracy of `model` under eval-mode argmax.
    pub fn evaluate(&self, model: &Classifier) -> Result<f64> {
        self.evaluate_predictions(&model.predict(&self.inputs)?)
    }

    /// Writes `x_0..x_{d-1},label` with every label set to -1.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_dataset_csv(path, &self.inputs, &vec![-1; self.len()])
    }
}

/// Strips the labels of `dataset` into evaluation-only storage.
pub fn as_target(dataset: LabeledDataset) -> UnlabeledDataset {
    UnlabeledDataset {
        inputs: dataset.inputs,
        hidden_labels: HiddenLabels(dataset.labels),
    }
}

/// Class-balanced Gaussian blobs under `spec.shift`, rows shuffled.
pub fn generate_domain(spec: &DomainSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let mut labels: Vec<usize> = (0..spec.sample_count).map(|i| i % spec.num_classes).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(spec.sample_count * spec.input_dim);
    for &y in &labels {
        let mut x: Vec<f64> = spec.class_means[y]
            .iter()
            .map(|m| m + spec.covariance_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        spec.shift.apply(&mut x);
        data.extend_from_slice(&x);
    }
    LabeledDataset::new(
        Matrix::new(spec.sample_count, spec.input_dim, data)?,
        labels,
        spec.num_classes,
    )
}

/// Replaces exactly `round(fraction * N)` labels, chosen uniformly without
/// replacement, with a uniformly drawn different class.
pub fn corrupt_labels(dataset: &LabeledDataset, fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidFraction(fraction));
    }
    let c = dataset.num_classes;
    if c < 2 {
        return Err(Error::InvalidSpec("corruption needs at least 2 classes".into()));
    }
    let mut rng = rng_from_seed(seed);
    let count = (fraction * dataset.len() as f64).round() as usize;
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let (chosen, _) = indices.partial_shuffle(&mut rng, count);
    let mut labels = dataset.labels.clone();
    for &i in chosen.iter() {
        let offset = rng.random_range(1..c);
        labels[i] = (labels[i] + offset) % c;
    }
    LabeledDataset::new(dataset.inputs.clone(), labels, c)
}

/// Inputs from one class-independent Gaussian placed far outside the
/// class-mean cloud of `spec`, labels drawn uniformly at random.
pub fn make_irrelevant_domain(spec: &DomainSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let d = spec.input_dim;
    let centroid: Vec<f64> = (0..d)
        .map(|j| spec.class_means.iter().map(|m| m[j]).sum::<f64>() / spec.num_classes as f64)
        .collect();
    let radius = spec
        .class_means
        .iter()
        .map(|m| distance(m, &centroid))
        .fold(0.0, f64::max)
        + spec.covariance_scale;
    let direction = random_unit(d, &mut rng);
    let scale = spec.covariance_scale * 2.0;
    let center: Vec<f64> = centroid
        .iter()
        .zip(&direction)
        .map(|(c, u)| c + u * (4.0 * radius + 6.0 * scale))
        .collect();
    let mut data = Vec::with_capacity(spec.sample_count * d);
    for _ in 0..spec.sample_count {
        data.extend(center.iter().map(|c| c + scale * rng.sample::<f64, _>(StandardNormal)));
    }
    let labels = (0..spec.sample_count)
        .map(|_| rng.random_range(0..spec.num_classes))
        .collect();
    LabeledDataset::new(Matrix::new(spec.sample_count, d, data)?, labels, spec.num_classes)
}

/// Class means drawn around `offset * 1` with standard deviation `spread`.
pub fn random_class_means(
    num_classes: usize,
    input_dim: usize,
    spread: f64,
    offset: f64,
    rng: &mut Rng,
) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|_| {
            (0..input_dim)
                .map(|_| offset + spread * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Uniformly random unit vector.
pub fn random_unit(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn write_dataset_csv(path: &Path, inputs: &Matrix, labels: &[i64]) -> Result<()> {
    let mut out = String::new();
    for j in 0..inputs.cols() {
        let _ = write!(out, "x_{j},");
    }
    out.push_str("label\n");
    for (row, label) in inputs.iter_rows().zip(labels) {
        for v in row {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{label}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_dataset_csv(path: &Path) -> Result<(Matrix, Vec<i64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::EmptyDataset)?;
    let cols = header.split(',').count().saturating_sub(1);
    let bad = |line: usize| Error::InvalidSpec(format!("{}: malformed line {line}", path.display()));
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols + 1 {
            return Err(bad(n + 2));
        }
        for f in &fields[..cols] {
            data.push(f.parse::<f64>().map_err(|_| bad(n + 2))?);
        }
        labels.push(fields[cols].parse::<i64>().map_err(|_| bad(n + 2))?);
    }
    Ok((Matrix::new(labels.len(), cols, data)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> DomainSpec {
        DomainSpec {
            num_classes: 2,
            input_dim: 3,
            class_means: vec![vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]],
            covariance_scale: 0.5,
            shift: Shift::none(3),
            sample_count: 100,
            seed,
        }
    }

    #[test]
    fn generation_is_seeded_and_shaped() {
        let a = generate_domain(&spec(3)).unwrap();
        assert_eq!(a, generate_domain(&spec(3)).unwrap());
        assert_ne!(a, generate_domain(&spec(4)).unwrap());
        assert_eq!(a.len(), 100);
        assert!(a.labels().iter().all(|&y| y < 2));
        assert_eq!(a.label_histogram(), vec![50, 50]);
    }

    #[test]
    fn degenerate_specs_rejected() {
        let mut s = spec(0);
        s.num_classes = 1;
        assert!(generate_domain(&s).is_err());
        let mut s = spec(0);
        s.sample_count = 1;
        assert!(generate_domain(&s).is_err());
        let mut s = spec(0);
        s.covariance_scale = 0.0;
        assert!(generate_domain(&s).is_err());
    }

    #[test]
    fn rotation_in_coordinate_planes() {
        let shift = Shift {
            angle: std::f64::consts::FRAC_PI_2,
            translation: vec![0.0, 0.0, 1.0],
        };
        let mut x = vec![1.0, 0.0, 2.0];
        shift.apply(&mut x);
        assert!((x[0]).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15 && x[2] == 3.0);
    }

    #[test]
    fn corruption_counts() {
        let data = generate_domain(&spec(1)).unwrap();
        assert_eq!(corrupt_labels(&data, 0.0, 9).unwrap(), data);
        let all = corrupt_labels(&data, 1.0, 9).unwrap();
        assert!(all.labels().iter().zip(data.labels()).all(|(a, b)| a != b));
        let some = corrupt_labels(&data, 0.3, 9).unwrap();
        let changed = some.labels().iter().zip(data.labels()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 30);
        assert_eq!(some.inputs(), data.inputs());
        assert_eq!(some, corrupt_labels(&data, 0.3, 9).unwrap());
        assert!(matches!(corrupt_labels(&data, 1.2, 0), Err(Error::InvalidFraction(_))));
    }

    #[test]
    fn target_keeps_inputs_and_scores_hidden_labels() {
        let data = generate_domain(&spec(2)).unwrap();
        let labels = data.labels().to_vec();
        let inputs = data.inputs().clone();
        let target = as_target(data);
        assert_eq!(target.inputs(), &inputs);
        assert_eq!(target.evaluate_predictions(&labels).unwrap(), 1.0);
        assert!(format!("{target:?}").contains("HiddenLabels(100 entries)"));
    }

    #[test]
    fn irrelevant_domain_is_deterministic_and_far() {
        let s = spec(5);
        let a = make_irrelevant_domain(&s, 11).unwrap();
        assert_eq!(a, make_irrelevant_domain(&s, 11).unwrap());
        let mean = a.inputs().column_means();
        let dist = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(dist > 4.0, "center only {dist} from the class cloud");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_domain(&spec(6)).unwrap();
        let path = dir.path().join("d.csv");
        data.write_csv(&path).unwrap();
        let back = LabeledDataset::read_csv(&path, 2).unwrap();
        assert_eq!(back, data);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x_0,x_1,x_2,label\n"));

        let target = as_target(data);
        target.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().skip(1).all(|l| l.ends_with(",-1")));
    }
}
