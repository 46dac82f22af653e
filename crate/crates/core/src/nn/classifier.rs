use rand::Rng as _;

use super::matrix::Matrix;
use super::params::{BatchNormParams, Layer, LayerKind, LinearParams, ModelParams};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Shape and BatchNorm hyper-parameters of the MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    /// Width of each `linear -> BatchNorm -> ReLU` block.
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Architecture {
    /// Three hidden blocks of equal width, BatchNorm momentum 0.1, epsilon 1e-5.
    pub fn mlp(input_dim: usize, width: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![width; 3],
            num_classes,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }

    pub fn manifest(&self) -> Vec<LayerKind> {
        let mut out = Vec::with_capacity(2 * self.hidden.len() + 1);
        let mut inputs = self.input_dim;
        for &width in &self.hidden {
            out.push(LayerKind::Linear {
                inputs,
                outputs: width,
            });
            out.push(LayerKind::BatchNorm { channels: width });
            inputs = width;
        }
        out.push(LayerKind::Linear {
            inputs,
            outputs: self.num_classes,
        });
        out
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig(format!("degenerate architecture {self:?}")));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) || self.bn_epsilon <= 0.0 {
            return Err(Error::InvalidConfig(
                "BatchNorm momentum must lie in (0, 1) and epsilon be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics normalize the features; running statistics are updated.
    Train,
    /// Stored running statistics normalize the features; nothing is mutated.
    Eval,
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Matrix,
    normalized: Matrix,
    inv_std: Vec<f64>,
    pre_activation: Matrix,
}

/// Outputs of a forward pass plus what backprop needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub mode: Mode,
    /// Softmax outputs, one row per sample.
    pub probs: Matrix,
    /// Pre-normalization activations entering each BatchNorm layer.
    pub bn_features: Vec<Matrix>,
    blocks: Vec<BlockCache>,
    head_input: Matrix,
}

/// MLP classifier holding an `f64` working copy of its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    arch: Architecture,
    params: ModelParams<f64>,
}

impl Classifier {
    /// Uniform fan-in initialization, identity BatchNorm.
    pub fn new(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .manifest()
            .into_iter()
            .map(|kind| match kind {
                LayerKind::Linear { inputs, outputs } => {
                    let bound = 1.0 / (inputs as f64).sqrt();
                    Layer::Linear(LinearParams {
                        inputs,
                        outputs,
                        weight: (0..inputs * outputs)
                            .map(|_| rng.random_range(-bound..bound))
                            .collect(),
                        bias: (0..outputs).map(|_| rng.random_range(-bound..bound)).collect(),
                    })
                }
                LayerKind::BatchNorm { channels } => Layer::BatchNorm(BatchNormParams {
                    gamma: vec![1.0; channels],
                    beta: vec![0.0; channels],
                    running_mean: vec![0.0; channels],
                    running_var: vec![1.0; channels],
                }),
            })
            .collect();
        Ok(Self {
            arch,
            params: ModelParams::new(layers)?,
        })
    }

    pub fn from_params(arch: Architecture, params: &ModelParams<f32>) -> Result<Self> {
        Self::from_params_f64(arch, params.to_f64())
    }

    pub fn from_params_f64(arch: Architecture, params: ModelParams<f64>) -> Result<Self> {
        arch.validate()?;
        if params.manifest() != arch.manifest() {
            return Err(Error::ManifestMismatch);
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn params(&self) -> &ModelParams<f64> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<f64> {
        &mut self.params
    }

    /// Parameters rounded to the `f32` upload representation.
    pub fn to_params(&self) -> ModelParams<f32> {
        self.params.to_f32()
    }

    pub fn forward(&mut self, batch: &Matrix, mode: Mode) -> Result<ForwardPass> {
        match mode {
            Mode::Eval => self.forward_eval(batch),
            Mode::Train => self.forward_train(batch),
        }
    }

    pub fn forward_eval(&self, batch: &Matrix) -> Result<ForwardPass> {
        self.check_input(batch)?;
        run_forward(&self.params, &self.arch, batch, None)
    }

    pub fn forward_train(&mut self, batch: &Matrix) -> Result<ForwardPass> {
        self.check_input(batch)?;
        if batch.rows() < 2 {
            return Err(Error::BatchTooSmall(batch.rows()));
        }
        let mut updates = Vec::with_capacity(self.arch.hidden.len());
        let pass = run_forward(&self.params, &self.arch, batch, Some(&mut updates))?;
        let m = self.arch.bn_momentum;
        for (bn, (mean, var)) in self.params.batch_norms_mut().zip(updates) {
            for (r, b) in bn.running_mean.iter_mut().zip(&mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in bn.running_var.iter_mut().zip(&var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
        Ok(pass)
    }

    pub fn predict_proba(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward_eval(batch)?.probs)
    }

    /// Argmax class per row (eval mode).
    pub fn predict(&self, batch: &Matrix) -> Result<Vec<usize>> {
        let probs = self.predict_proba(batch)?;
        Ok(probs.iter_rows().map(super::argmax).collect())
    }

    /// Backpropagates `dlogits` (gradient of a scalar loss with respect to the
    /// head logits) and optional extra gradients injected at each BatchNorm
    /// input feature. Running-statistic slots of the result are zero.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        dlogits: &Matrix,
        bn_feature_grads: Option<&[Matrix]>,
    ) -> Result<ModelParams<f64>> {
        let n = pass.probs.rows();
        if dlogits.rows() != n || dlogits.cols() != self.arch.num_classes {
            return Err(Error::DimensionMismatch {
                context: "logit gradient",
                expected: n * self.arch.num_classes,
                found: dlogits.rows() * dlogits.cols(),
            });
        }
        if let Some(extra) = bn_feature_grads {
            if extra.len() != pass.blocks.len() {
                return Err(Error::DimensionMismatch {
                    context: "BatchNorm feature gradients",
                    expected: pass.blocks.len(),
                    found: extra.len(),
                });
            }
            for (g, f) in extra.iter().zip(&pass.bn_features) {
                if g.rows() != f.rows() || g.cols() != f.cols() {
                    return Err(Error::DimensionMismatch {
                        context: "BatchNorm feature gradient shape",
                        expected: f.rows() * f.cols(),
                        found: g.rows() * g.cols(),
                    });
                }
            }
        }

        let mut grads = self.params.zeros_like();
        let layers = self.params.layers();
        let head_index = layers.len() - 1;
        let mut upstream = {
            let Layer::Linear(head) = &layers[head_index] else {
                unreachable!("manifest ends with a linear head")
            };
            let Layer::Linear(g) = &mut grads.layers_mut()[head_index] else {
                unreachable!()
            };
            linear_backward(head, &pass.head_input, dlogits, g)
        };

        for (b, cache) in pass.blocks.iter().enumerate().rev() {
            let (Layer::Linear(lin), Layer::BatchNorm(bn)) = (&layers[2 * b], &layers[2 * b + 1])
            else {
                unreachable!("blocks alternate linear and BatchNorm")
            };
            let channels = bn.channels();
            // ReLU
            let mut dy = upstream;
            for (d, y) in dy.data_mut().iter_mut().zip(cache.pre_activation.data()) {
                if *y <= 0.0 {
                    *d = 0.0;
                }
            }
            let mut dgamma = vec![0.0; channels];
            let mut dbeta = vec![0.0; channels];
            for (drow, xrow) in dy.iter_rows().zip(cache.normalized.iter_rows()) {
                for c in 0..channels {
                    dgamma[c] += drow[c] * xrow[c];
                    dbeta[c] += drow[c];
                }
            }
            let mut dz = Matrix::zeros(n, channels);
            match pass.mode {
                Mode::Eval => {
                    for i in 0..n {
                        for c in 0..channels {
                            dz.row_mut(i)[c] = dy.get(i, c) * bn.gamma[c] * cache.inv_std[c];
                        }
                    }
                }
                Mode::Train => {
                    // dxhat = dy * gamma; dz = inv_std/N * (N dxhat - sum dxhat - xhat sum(dxhat xhat))
                    let nf = n as f64;
                    for c in 0..channels {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for i in 0..n {
                            let d = dy.get(i, c) * bn.gamma[c];
                            sum_d += d;
                            sum_dx += d * cache.normalized.get(i, c);
                        }
                        for i in 0..n {
                            let d = dy.get(i, c) * bn.gamma[c];
                            let xh = cache.normalized.get(i, c);
                            dz.row_mut(i)[c] = cache.inv_std[c] / nf * (nf * d - sum_d - xh * sum_dx);
                        }
                    }
                }
            }
            if let Some(extra) = bn_feature_grads {
                for (d, e) in dz.data_mut().iter_mut().zip(extra[b].data()) {
                    *d += e;
                }
            }
            {
                let Layer::BatchNorm(g) = &mut grads.layers_mut()[2 * b + 1] else {
                    unreachable!()
                };
                g.gamma = dgamma;
                g.beta = dbeta;
            }
            let Layer::Linear(g) = &mut grads.layers_mut()[2 * b] else {
                unreachable!()
            };
            upstream = linear_backward(lin, &cache.input, &dz, g);
        }
        Ok(grads)
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.arch.input_dim {
            return Err(Error::DimensionMismatch {
                context: "classifier input",
                expected: self.arch.input_dim,
                found: batch.cols(),
            });
        }
        if batch.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(())
    }
}

type BatchMoments = Vec<(Vec<f64>, Vec<f64>)>;

fn run_forward(
    params: &ModelParams<f64>,
    arch: &Architecture,
    batch: &Matrix,
    mut train_stats: Option<&mut BatchMoments>,
) -> Result<ForwardPass> {
    let layers = params.layers();
    let mode = if train_stats.is_some() {
        Mode::Train
    } else {
        Mode::Eval
    };
    let mut blocks = Vec::with_capacity(arch.hidden.len());
    let mut bn_features = Vec::with_capacity(arch.hidden.len());
    let mut x = batch.clone();
    for b in 0..arch.hidden.len() {
        let (Layer::Linear(lin), Layer::BatchNorm(bn)) = (&layers[2 * b], &layers[2 * b + 1]) else {
            return Err(Error::ManifestMismatch);
        };
        let z = x.affine(&lin.weight, &lin.bias);
        let (mean, inv_std) = match train_stats.as_deref_mut() {
            Some(stats) => {
                let mean = z.column_means();
                let mut var = vec![0.0; z.cols()];
                for row in z.iter_rows() {
                    for ((v, r), m) in var.iter_mut().zip(row).zip(&mean) {
                        *v += (r - m) * (r - m);
                    }
                }
                let nf = z.rows() as f64;
                var.iter_mut().for_each(|v| *v /= nf);
                let inv_std = var.iter().map(|v| 1.0 / (v + arch.bn_epsilon).sqrt()).collect();
                stats.push((mean.clone(), var));
                (mean, inv_std)
            }
            None => (
                bn.running_mean.clone(),
                bn.running_var
                    .iter()
                    .map(|v| 1.0 / (v.max(0.0) + arch.bn_epsilon).sqrt())
                    .collect::<Vec<_>>(),
            ),
        };
        let mut normalized = z.clone();
        let mut pre_activation = z.clone();
        for i in 0..z.rows() {
            let zr = z.row(i);
            let nr = normalized.row_mut(i);
            for c in 0..zr.len() {
                nr[c] = (zr[c] - mean[c]) * inv_std[c];
            }
            let pr = pre_activation.row_mut(i);
            for c in 0..zr.len() {
                pr[c] = bn.gamma[c] * nr[c] + bn.beta[c];
            }
        }
        let mut activated = pre_activation.clone();
        activated.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        bn_features.push(z);
        blocks.push(BlockCache {
            input: x,
            normalized,
            inv_std,
            pre_activation,
        });
        x = activated;
    }
    let Some(Layer::Linear(head)) = layers.last() else {
        return Err(Error::ManifestMismatch);
    };
    let mut probs = x.affine(&head.weight, &head.bias);
    for row in 0..probs.rows() {
        softmax_in_place(probs.row_mut(row));
    }
    if probs.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax output"));
    }
    Ok(ForwardPass {
        mode,
        probs,
        bn_features,
        blocks,
        head_input: x,
    })
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Fills `grad` with the weight/bias gradients and returns the input gradient.
fn linear_backward(
    layer: &LinearParams<f64>,
    input: &Matrix,
    dout: &Matrix,
    grad: &mut LinearParams<f64>,
) -> Matrix {
    let (inp, out) = (layer.inputs, layer.outputs);
    let mut dx = Matrix::zeros(input.rows(), inp);
    for ((xrow, drow), dxrow) in input
        .iter_rows()
        .zip(dout.iter_rows())
        .zip(dx.data_mut().chunks_exact_mut(inp))
    {
        for o in 0..out {
            let d = drow[o];
            if d == 0.0 {
                continue;
            }
            grad.bias[o] += d;
            let w = &layer.weight[o * inp..(o + 1) * inp];
            let gw = &mut grad.weight[o * inp..(o + 1) * inp];
            for i in 0..inp {
                gw[i] += d * xrow[i];
                dxrow[i] += d * w[i];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn small() -> Classifier {
        Classifier::new(Architecture::mlp(3, 4, 3), &mut rng_from_seed(1)).unwrap()
    }

    fn batch() -> Matrix {
        Matrix::from_rows(&[
            vec![0.1, -0.4, 1.0],
            vec![2.0, 0.3, -1.0],
            vec![-0.5, 0.5, 0.5],
            vec![1.5, -1.5, 0.0],
        ])
        .unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_probs() {
        let mut model = small();
        for (t, _) in model.params_mut().tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        let probs = model.predict_proba(&batch()).unwrap();
        for v in probs.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_is_pure_and_rows_sum_to_one() {
        let model = small();
        let a = model.forward_eval(&batch()).unwrap();
        let b = model.forward_eval(&batch()).unwrap();
        assert_eq!(a.probs, b.probs);
        for row in a.probs.iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        assert_eq!(a.bn_features.len(), 3);
    }

    #[test]
    fn running_mean_moves_by_momentum() {
        // One channel whose pre-normalization feature equals the single input.
        let arch = Architecture {
            input_dim: 1,
            hidden: vec![1],
            num_classes: 2,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        };
        let params = ModelParams::new(vec![
            Layer::Linear(LinearParams {
                inputs: 1,
                outputs: 1,
                weight: vec![1.0],
                bias: vec![0.0],
            }),
            Layer::BatchNorm(BatchNormParams {
                gamma: vec![1.0],
                beta: vec![0.0],
                running_mean: vec![0.0],
                running_var: vec![1.0],
            }),
            Layer::Linear(LinearParams {
                inputs: 1,
                outputs: 2,
                weight: vec![1.0, -1.0],
                bias: vec![0.0, 0.0],
            }),
        ])
        .unwrap();
        let mut model = Classifier::from_params_f64(arch, params).unwrap();
        let x = Matrix::from_rows(&[vec![0.5], vec![1.5]]).unwrap();
        model.forward(&x, Mode::Train).unwrap();
        let bn = model.params().batch_norms().next().unwrap();
        assert!((bn.running_mean[0] - 0.1).abs() < 1e-12);
        // biased batch variance 0.25
        assert!((bn.running_var[0] - (0.9 + 0.1 * 0.25)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut model = small();
        let wrong = Matrix::zeros(2, 5);
        assert!(matches!(
            model.forward_eval(&wrong),
            Err(Error::DimensionMismatch { .. })
        ));
        let single = Matrix::zeros(1, 3);
        assert!(matches!(
            model.forward(&single, Mode::Train),
            Err(Error::BatchTooSmall(1))
        ));
        let other = Architecture::mlp(3, 5, 3);
        assert!(Classifier::from_params(other, &model.to_params()).is_err());
    }
}
