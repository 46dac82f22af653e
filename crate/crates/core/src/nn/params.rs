use crate::error::{Error, Result};

/// Element type of a parameter set: `f32` on the wire, `f64` while training.
pub trait Scalar: Copy + Default + PartialEq + std::fmt::Debug + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Shape entry of the parameter manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Linear { inputs: usize, outputs: usize },
    BatchNorm { channels: usize },
}

/// Fully connected layer; `weight` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T> BatchNormParams<T> {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Linear(LinearParams<T>),
    BatchNorm(BatchNormParams<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Linear(l) => LayerKind::Linear {
                inputs: l.inputs,
                outputs: l.outputs,
            },
            Layer::BatchNorm(b) => LayerKind::BatchNorm {
                channels: b.channels(),
            },
        }
    }
}

/// Ordered parameter blocks of a classifier, including BatchNorm running
/// statistics. This is the unit a source silo uploads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Builds a parameter set, checking every block against its own shape.
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        for layer in &layers {
            match layer {
                Layer::Linear(l) => {
                    check_len("linear weight", l.inputs * l.outputs, l.weight.len())?;
                    check_len("linear bias", l.outputs, l.bias.len())?;
                }
                Layer::BatchNorm(b) => {
                    let c = b.gamma.len();
                    check_len("batchnorm beta", c, b.beta.len())?;
                    check_len("batchnorm running_mean", c, b.running_mean.len())?;
                    check_len("batchnorm running_var", c, b.running_var.len())?;
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn manifest(&self) -> Vec<LayerKind> {
        self.layers.iter().map(Layer::kind).collect()
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNormParams<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BatchNorm(b) => Some(b),
            Layer::Linear(_) => None,
        })
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNormParams<T>> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::BatchNorm(b) => Some(b),
            Layer::Linear(_) => None,
        })
    }

    /// Every tensor in manifest order, paired with whether SGD may update it
    /// (running statistics are not trainable).
    pub fn tensors(&self) -> Vec<(&[T], bool)> {
        let mut out = Vec::with_capacity(self.layers.len() * 4);
        for layer in &self.layers {
            match layer {
                Layer::Linear(l) => {
                    out.push((l.weight.as_slice(), true));
                    out.push((l.bias.as_slice(), true));
                }
                Layer::BatchNorm(b) => {
                    out.push((b.gamma.as_slice(), true));
                    out.push((b.beta.as_slice(), true));
                    out.push((b.running_mean.as_slice(), false));
                    out.push((b.running_var.as_slice(), false));
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&mut [T], bool)> {
        let mut out = Vec::with_capacity(self.layers.len() * 4);
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) => {
                    out.push((l.weight.as_mut_slice(), true));
                    out.push((l.bias.as_mut_slice(), true));
                }
                Layer::BatchNorm(b) => {
                    out.push((b.gamma.as_mut_slice(), true));
                    out.push((b.beta.as_mut_slice(), true));
                    out.push((b.running_mean.as_mut_slice(), false));
                    out.push((b.running_var.as_mut_slice(), false));
                }
            }
        }
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(t, _)| t.len()).sum()
    }

    /// All values flattened in manifest order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors()
            .into_iter()
            .flat_map(|(t, _)| t.iter().copied())
            .collect()
    }

    /// Same manifest, every value mapped through `f`.
    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> ModelParams<U> {
        let conv = |v: &[T]| v.iter().map(|&x| f(x)).collect::<Vec<U>>();
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Linear(l) => Layer::Linear(LinearParams {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    weight: conv(&l.weight),
                    bias: conv(&l.bias),
                }),
                Layer::BatchNorm(b) => Layer::BatchNorm(BatchNormParams {
                    gamma: conv(&b.gamma),
                    beta: conv(&b.beta),
                    running_mean: conv(&b.running_mean),
                    running_var: conv(&b.running_var),
                }),
            })
            .collect();
        ModelParams { layers }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| T::default())
    }

    pub fn to_f64(&self) -> ModelParams<f64> {
        self.map(Scalar::to_f64)
    }

    pub fn to_f32(&self) -> ModelParams<f32> {
        self.map(|v| v.to_f64() as f32)
    }

    pub fn same_manifest<U: Scalar>(&self, other: &ModelParams<U>) -> bool {
        self.manifest() == other.manifest()
    }
}

fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}

pub(crate) fn check_simplex_weights(weights: &[f64]) -> Result<()> {
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidWeights { sum });
    }
    Ok(())
}

/// Elementwise convex combination `sum_k weights[k] * models[k]` over every
/// value, BatchNorm running statistics included. Accumulates in `f64`.
pub fn aggregate_params<T: Scalar>(models: &[&ModelParams<T>], weights: &[f64]) -> Result<ModelParams<T>> {
    let first = models.first().ok_or(Error::EmptyDataset)?;
    if models.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            context: "aggregation weights",
            expected: models.len(),
            found: weights.len(),
        });
    }
    check_simplex_weights(weights)?;
    let manifest = first.manifest();
    if models.iter().any(|m| m.manifest() != manifest) {
        return Err(Error::ManifestMismatch);
    }

    let mut acc = first.map(|_| 0.0f64);
    for (model, &w) in models.iter().zip(weights) {
        for ((dst, _), (src, _)) in acc.tensors_mut().into_iter().zip(model.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s.to_f64();
            }
        }
    }
    Ok(acc.map(T::from_f64))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn scalar_model(v: f32) -> ModelParams<f32> {
        ModelParams::new(vec![Layer::Linear(LinearParams {
            inputs: 1,
            outputs: 1,
            weight: vec![v],
            bias: vec![0.0],
        })])
        .unwrap()
    }

    #[test]
    fn aggregate_hand_value() {
        let a = scalar_model(1.0);
        let b = scalar_model(3.0);
        let agg = aggregate_params(&[&a, &b], &[0.25, 0.75]).unwrap();
        assert_eq!(agg.flatten()[0], 2.5);
    }

    #[test]
    fn one_hot_weight_copies_bit_exact() {
        let a = scalar_model(0.1);
        let b = scalar_model(-7.3);
        let agg = aggregate_params(&[&a, &b], &[0.0, 1.0]).unwrap();
        assert_eq!(agg, b);
    }

    #[test]
    fn rejects_mismatch_and_bad_weights() {
        let a = scalar_model(1.0);
        let bn = ModelParams::new(vec![Layer::BatchNorm(BatchNormParams {
            gamma: vec![1.0],
            beta: vec![0.0],
            running_mean: vec![0.0],
            running_var: vec![1.0],
        })])
        .unwrap();
        assert!(matches!(
            aggregate_params(&[&a, &bn], &[0.5, 0.5]),
            Err(Error::ManifestMismatch)
        ));
        assert!(matches!(
            aggregate_params(&[&a, &a], &[0.6, 0.6]),
            Err(Error::InvalidWeights { .. })
        ));
        assert!(aggregate_params(&[&a, &a], &[1.5, -0.5]).is_err());
    }

    #[test]
    fn new_checks_block_shapes() {
        let bad = ModelParams::<f32>::new(vec![Layer::Linear(LinearParams {
            inputs: 2,
            outputs: 2,
            weight: vec![0.0; 3],
            bias: vec![0.0; 2],
        })]);
        assert!(bad.is_err());
    }
}
