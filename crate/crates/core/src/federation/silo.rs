use rand::seq::SliceRandom;

use crate::error::Result;
use crate::nn::{cross_entropy_grad, cross_entropy_loss, encode, Architecture, Classifier, ModelParams, Sgd};
use crate::rng::{rng_from_seed, Rng};
use crate::synth::LabeledDataset;

/// Hyper-parameters of one local optimization stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSettings {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

/// Fixed-size minibatches drawn from reshuffled passes over `n` samples.
pub(crate) struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: Rng,
}

impl BatchStream {
    pub(crate) fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut stream = Self {
            order: (0..n).collect(),
            cursor: n,
            batch: batch.clamp(2, n.max(2)),
            rng: rng_from_seed(seed),
        };
        stream.cursor = stream.order.len();
        stream
    }

    pub(crate) fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.cursor >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Number of minibatches in one pass over `n` samples.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1)).max(1)
}

/// Mean training loss of each step in a stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageStats {
    pub losses: Vec<f64>,
}

impl StageStats {
    pub fn mean_loss(&self) -> f64 {
        if self.losses.is_empty() {
            f64::NAN
        } else {
            self.losses.iter().sum::<f64>() / self.losses.len() as f64
        }
    }
}

/// Trains a copy of `init` with cross-entropy on `domain` alone.
pub fn local_train_stage(
    domain: &LabeledDataset,
    init: &ModelParams<f32>,
    arch: &Architecture,
    settings: &StageSettings,
) -> Result<(ModelParams<f32>, StageStats)> {
    let mut model = Classifier::from_params(arch.clone(), init)?;
    if settings.steps == 0 {
        return Ok((init.clone(), StageStats::default()));
    }
    let mut opt = Sgd::new(settings.momentum);
    let mut batches = BatchStream::new(domain.len(), settings.batch_size, settings.seed);
    let mut stats = StageStats::default();
    for _ in 0..settings.steps {
        let idx = batches.next_batch();
        let x = domain.inputs().select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| domain.labels()[i]).collect();
        let pass = model.forward_train(&x)?;
        stats.losses.push(cross_entropy_loss(&pass.probs, &y)?);
        let dlogits = cross_entropy_grad(&pass.probs, &y)?;
        let grads = model.backward(&pass, &dlogits, None)?;
        opt.step(model.params_mut(), &grads, settings.lr)?;
    }
    Ok((model.to_params(), stats))
}

/// What a source silo sends to the target node.
#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub source: usize,
    pub sample_count: usize,
    /// Wire-format model.
    pub bytes: Vec<u8>,
    pub train_loss: f64,
}

/// A source domain behind its own boundary. The public surface hands out
/// serialized models and the sample count; raw data leaves only through the
/// explicitly named oracle accessor used by simulation baselines.
#[derive(Debug, Clone)]
pub struct SourceSilo {
    id: usize,
    data: LabeledDataset,
}

impl SourceSilo {
    pub fn new(id: usize, data: LabeledDataset) -> Self {
        Self { id, data }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn sample_count(&self) -> usize {
        self.data.len()
    }

    /// Runs a local stage from the broadcast global model and serializes the
    /// result.
    pub fn train_and_upload(
        &self,
        global: &ModelParams<f32>,
        arch: &Architecture,
        settings: &StageSettings,
    ) -> Result<Upload> {
        let (params, stats) = local_train_stage(&self.data, global, arch, settings)?;
        Ok(Upload {
            source: self.id,
            sample_count: self.data.len(),
            bytes: encode(&params),
            train_loss: stats.mean_loss(),
        })
    }

    /// Simulation-only escape hatch for baselines that need raw source
    /// inputs (input-space divergence weighting). Not decentralized.
    pub fn oracle_inputs(&self) -> &crate::nn::Matrix {
        self.data.inputs()
    }
}
