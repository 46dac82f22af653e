//! The per-sync training protocol.
//!
//! Each sync: every source silo trains the broadcast global model on its own
//! data and uploads the serialized result; the target node votes the uploads
//! into consensus items, trains an extra model on them, weights the K + 1
//! models, aggregates every parameter and finally overwrites the BatchNorm
//! statistics with the moment-matching optimum.

mod comm;
mod silo;

use std::path::PathBuf;

use rayon::prelude::*;

pub use comm::{sync_schedule, CommRounds, CommunicationLog, SyncPoint, SyncRecord};
pub use silo::{batches_per_epoch, local_train_stage, SourceSilo, StageSettings, StageStats, Upload};

use crate::bn_mmd::{bn_mmd_loss, closed_form_bn_update, extract_bn_stats, BnStats};
use crate::error::{Error, Result};
use crate::focus::{
    a_distance_proxy, baseline_weights, cf_values, datasize_weights, domain_weights_cf,
    BaselineContext, CfReport, DomainWeights, WeightingStrategy,
};
use crate::nn::{
    aggregate_params, cosine_lr, decode, encoded_len, weighted_kd_batch_loss, weighted_kd_grad,
    Architecture, Classifier, Matrix, ModelParams, Sgd, DEFAULT_MOMENTUM,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::synth::UnlabeledDataset;
use crate::vote::{extended_domain_from_outputs, teacher_outputs, ConsensusItem, ExtendedDomain};
use silo::BatchStream;

/// Linear confidence-gate ramp from `gate_lo` at epoch 0 to `gate_hi` at
/// `total_epochs`.
pub fn confidence_gate_schedule(epoch: f64, total_epochs: f64, gate_lo: f64, gate_hi: f64) -> f64 {
    if total_epochs <= 0.0 {
        return gate_hi;
    }
    gate_lo + (gate_hi - gate_lo) * (epoch / total_epochs).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Plain data-size averaging of source models; the target is never used.
    SourceOnly,
    Kd3a,
}

/// Which of the three adaptation components run; a disabled component is
/// replaced by its neutral fallback (mean-ensemble distillation with unit
/// support, data-size weights, no BatchNorm alignment).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Components {
    pub knowledge_vote: bool,
    pub consensus_focus: bool,
    pub bn_mmd: bool,
}

impl Components {
    pub const ALL: Components = Components {
        knowledge_vote: true,
        consensus_focus: true,
        bn_mmd: true,
    };
    pub const NONE: Components = Components {
        knowledge_vote: false,
        consensus_focus: false,
        bn_mmd: false,
    };

    pub fn label(self) -> String {
        let mut parts = Vec::new();
        if self.knowledge_vote {
            parts.push("kv");
        }
        if self.consensus_focus {
            parts.push("cf");
        }
        if self.bn_mmd {
            parts.push("bn");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

impl Default for Components {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMmdMode {
    /// Substitute the weighted source moments into the global model.
    ClosedForm,
    /// SGD on the mini-batch moment-matching loss over target batches.
    Gradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub epochs: usize,
    pub rounds: CommRounds,
    pub gate_lo: f64,
    pub gate_hi: f64,
    pub lr_hi: f64,
    pub lr_lo: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub method: Method,
    pub weighting: WeightingStrategy,
    pub components: Components,
    pub bn_mmd_mode: BnMmdMode,
    pub arch: Architecture,
    pub seed: u64,
    /// When set, the global model is written as `epoch_{t}.kd3a` after
    /// every completed epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl RoundConfig {
    pub fn new(arch: Architecture, seed: u64) -> Self {
        Self {
            epochs: 30,
            rounds: CommRounds::PerEpoch(1),
            gate_lo: 0.8,
            gate_hi: 0.95,
            lr_hi: 0.05,
            lr_lo: 0.001,
            momentum: DEFAULT_MOMENTUM,
            batch_size: 32,
            method: Method::Kd3a,
            weighting: WeightingStrategy::ConsensusFocus,
            components: Components::ALL,
            bn_mmd_mode: BnMmdMode::Gradient,
            arch,
            seed,
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(0.0 < self.gate_lo && self.gate_lo <= self.gate_hi && self.gate_hi < 1.0) {
            return bad("gates must satisfy 0 < gate_lo <= gate_hi < 1");
        }
        if !(self.lr_hi >= self.lr_lo && self.lr_lo >= 0.0 && self.lr_hi.is_finite()) {
            return bad("learning rates must satisfy 0 <= lr_lo <= lr_hi");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if self.rate() <= 0.0 {
            return bad("communication rate must be positive");
        }
        Ok(())
    }

    pub fn rate(&self) -> f64 {
        self.rounds.rate()
    }
}

/// What happened in one sync.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub sync: usize,
    pub epoch_position: f64,
    pub lr: f64,
    pub gate: f64,
    pub source_losses: Vec<f64>,
    pub kv_loss: f64,
    pub cf: Option<CfReport>,
    pub cf_fallback: bool,
    pub weights: DomainWeights,
    pub fallback_fraction: f64,
    /// Pairs `(p, q)` of consensus and student predictions on a few target
    /// samples, kept for the Pinsker diagnostic.
    pub kd_pairs: Vec<(Vec<f64>, Vec<f64>)>,
    /// Whether the extended domain borrowed the target inputs unchanged;
    /// `None` when no extended domain was built.
    pub extended_inputs_are_target: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct RoundState {
    pub global: ModelParams<f32>,
    /// Models uploaded by the sources in the latest sync.
    pub source_params: Vec<ModelParams<f32>>,
    pub syncs_done: usize,
    pub gate: f64,
    pub weights: Option<DomainWeights>,
    pub log: CommunicationLog,
    pub history: Vec<RoundRecord>,
    divergences: Option<Vec<f64>>,
}

impl RoundState {
    /// Fresh global model drawn from the config seed. Divergence estimates
    /// are computed here, through the oracle accessor, only for the
    /// divergence-weighting baseline.
    pub fn init(config: &RoundConfig, silos: &[SourceSilo], target: &UnlabeledDataset) -> Result<Self> {
        config.validate()?;
        if silos.len() < 2 {
            return Err(Error::TooFewSources {
                required: 2,
                found: silos.len(),
            });
        }
        let mut rng = rng_from_seed(derive_seed(config.seed, &[0x1417]));
        let global = Classifier::new(config.arch.clone(), &mut rng)?.to_params();
        let divergences = if config.method == Method::Kd3a
            && config.weighting == WeightingStrategy::HDivergence
        {
            Some(
                silos
                    .iter()
                    .map(|s| {
                        a_distance_proxy(
                            s.oracle_inputs(),
                            target.inputs(),
                            derive_seed(config.seed, &[0xd15c, s.id() as u64]),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            global,
            source_params: Vec::new(),
            syncs_done: 0,
            gate: config.gate_lo,
            weights: None,
            log: CommunicationLog::default(),
            history: Vec::new(),
            divergences,
        })
    }

    pub fn divergences(&self) -> Option<&[f64]> {
        self.divergences.as_deref()
    }
}

fn stage_steps(samples: usize, batch_size: usize, span: f64) -> usize {
    (span * batches_per_epoch(samples, batch_size) as f64).ceil() as usize
}

fn wrap(point: &SyncPoint, stage: &'static str) -> impl FnOnce(Error) -> Error {
    let (sync, epoch) = (point.index, point.start.floor() as usize);
    move |e| Error::Round {
        sync,
        epoch,
        stage,
        source: Box::new(e),
    }
}

/// Mean ensemble of every teacher with unit support: the vote-free fallback.
pub fn mean_ensemble_items(outputs: &[Matrix]) -> Result<Vec<ConsensusItem>> {
    let k = outputs.len() as f64;
    let n = outputs.first().map_or(0, Matrix::rows);
    (0..n)
        .map(|i| {
            let mut p = vec![0.0; outputs[0].cols()];
            for m in outputs {
                p.iter_mut().zip(m.row(i)).for_each(|(a, b)| *a += b);
            }
            p.iter_mut().for_each(|v| *v /= k);
            ConsensusItem::new(p, 1.0)
        })
        .collect()
}

/// Trains a copy of `init` on the extended domain with the support-weighted
/// distillation loss.
pub fn train_on_consensus(
    init: &ModelParams<f32>,
    arch: &Architecture,
    domain: &ExtendedDomain<'_>,
    settings: &StageSettings,
) -> Result<(ModelParams<f32>, StageStats)> {
    let mut model = Classifier::from_params(arch.clone(), init)?;
    let mut opt = Sgd::new(settings.momentum);
    let mut batches = BatchStream::new(domain.len(), settings.batch_size, settings.seed);
    let mut stats = StageStats::default();
    for _ in 0..settings.steps {
        let idx = batches.next_batch();
        let x = domain.inputs.select_rows(&idx);
        let items: Vec<ConsensusItem> = idx.iter().map(|&i| domain.items[i].clone()).collect();
        let pass = model.forward_train(&x)?;
        stats.losses.push(weighted_kd_batch_loss(&items, &pass.probs)?);
        let dlogits = weighted_kd_grad(&items, &pass.probs)?;
        let grads = model.backward(&pass, &dlogits, None)?;
        opt.step(model.params_mut(), &grads, settings.lr)?;
    }
    Ok((model.to_params(), stats))
}

/// Global gradient-norm cap for the moment-matching stage.
pub const BN_MMD_MAX_GRAD_NORM: f64 = 1.0;

/// Rescales `grads` in place so its trainable L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut ModelParams<f64>, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .filter(|(_, trainable)| *trainable)
        .flat_map(|(t, _)| t.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (t, trainable) in grads.tensors_mut() {
            if trainable {
                t.iter_mut().for_each(|g| *g *= scale);
            }
        }
    }
    norm
}

/// Gradient variant of BatchNorm alignment: SGD on the mini-batch
/// moment-matching loss over target batches, with gradients clipped to
/// [`BN_MMD_MAX_GRAD_NORM`]. Every parameter upstream of a BatchNorm input
/// receives gradient; the head does not.
pub fn bn_mmd_gradient_stage(
    global: &ModelParams<f32>,
    arch: &Architecture,
    target: &UnlabeledDataset,
    sources: &[BnStats],
    weights: &DomainWeights,
    settings: &StageSettings,
) -> Result<(ModelParams<f32>, StageStats)> {
    let mut model = Classifier::from_params(arch.clone(), global)?;
    let mut opt = Sgd::new(settings.momentum);
    let mut batches = BatchStream::new(target.len(), settings.batch_size, settings.seed);
    let mut stats = StageStats::default();
    let zero = Matrix::zeros(batches.next_batch().len(), arch.num_classes);
    for _ in 0..settings.steps {
        let x = target.inputs().select_rows(&batches.next_batch());
        let pass = model.forward_train(&x)?;
        let (loss, feature_grads) = bn_mmd_loss(&pass.bn_features, sources, weights)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("moment-matching loss"));
        }
        stats.losses.push(loss);
        let mut grads = model.backward(&pass, &zero, Some(&feature_grads))?;
        clip_grad_norm(&mut grads, BN_MMD_MAX_GRAD_NORM);
        opt.step(model.params_mut(), &grads, settings.lr)?;
    }
    Ok((model.to_params(), stats))
}

const KD_PAIR_SAMPLES: usize = 16;

/// One synchronization: local training, upload, vote, consensus focus,
/// aggregation and BatchNorm alignment.
pub fn kd3a_round(
    mut state: RoundState,
    silos: &[SourceSilo],
    target: &UnlabeledDataset,
    config: &RoundConfig,
) -> Result<RoundState> {
    let schedule = sync_schedule(config.epochs, config.rounds);
    let point = *schedule
        .get(state.syncs_done)
        .ok_or_else(|| Error::InvalidConfig("training schedule exhausted".into()))?;
    if silos.len() < 2 {
        return Err(Error::TooFewSources {
            required: 2,
            found: silos.len(),
        });
    }
    let total = config.epochs as f64;
    let lr = cosine_lr(point.start, total, config.lr_hi, config.lr_lo);
    let gate = confidence_gate_schedule(point.start, total, config.gate_lo, config.gate_hi);
    let settings_for = |samples: usize, stream: u64| StageSettings {
        lr,
        steps: stage_steps(samples, config.batch_size, point.span),
        batch_size: config.batch_size,
        momentum: config.momentum,
        seed: derive_seed(config.seed, &[point.index as u64, stream]),
    };

    // Local training on every silo, then upload. All silos share one
    // batch-order stream.
    let global = state.global.clone();
    let uploads = silos
        .par_iter()
        .map(|s| s.train_and_upload(&global, &config.arch, &settings_for(s.sample_count(), 0)))
        .collect::<Result<Vec<Upload>>>()
        .map_err(wrap(&point, "local training"))?;
    state.log.records.push(SyncRecord {
        sync: point.index,
        epoch: point.start.floor() as usize,
        bytes_per_source: uploads.iter().map(|u| u.bytes.len()).collect(),
    });

    // Everything below runs on the target node and sees only uploads.
    let teachers_params = uploads
        .iter()
        .map(|u| decode(&u.bytes))
        .collect::<Result<Vec<_>>>()
        .map_err(wrap(&point, "upload decoding"))?;
    let sizes: Vec<usize> = uploads.iter().map(|u| u.sample_count).collect();
    let source_losses: Vec<f64> = uploads.iter().map(|u| u.train_loss).collect();

    let record = match config.method {
        Method::SourceOnly => {
            let weights = datasize_weights(&sizes, 0).map_err(wrap(&point, "weighting"))?;
            let refs: Vec<&ModelParams<f32>> = teachers_params.iter().collect();
            state.global = aggregate_params(&refs, weights.sources()).map_err(wrap(&point, "aggregation"))?;
            RoundRecord {
                sync: point.index,
                epoch_position: point.start,
                lr,
                gate,
                source_losses,
                kv_loss: f64::NAN,
                cf: None,
                cf_fallback: false,
                weights,
                fallback_fraction: f64::NAN,
                kd_pairs: Vec::new(),
                extended_inputs_are_target: None,
            }
        }
        Method::Kd3a => {
            let teachers = teachers_params
                .iter()
                .map(|p| Classifier::from_params(config.arch.clone(), p))
                .collect::<Result<Vec<_>>>()
                .map_err(wrap(&point, "upload decoding"))?;
            let outputs = teacher_outputs(target, &teachers).map_err(wrap(&point, "teacher inference"))?;

            let domain = if config.components.knowledge_vote {
                extended_domain_from_outputs(target, &outputs, gate)
            } else {
                mean_ensemble_items(&outputs).map(|items| ExtendedDomain {
                    inputs: target.inputs(),
                    items,
                })
            }
            .map_err(wrap(&point, "knowledge vote"))?;
            let (student, kv_stats) = train_on_consensus(
                &state.global,
                &config.arch,
                &domain,
                &settings_for(target.len(), u64::MAX),
            )
            .map_err(wrap(&point, "consensus training"))?;

            let (weights, cf, cf_fallback) = match config.weighting {
                WeightingStrategy::ConsensusFocus if config.components.consensus_focus => {
                    let report = cf_values(&outputs, gate).map_err(wrap(&point, "consensus focus"))?;
                    let (w, fb) =
                        domain_weights_cf(&report, &sizes, target.len()).map_err(wrap(&point, "consensus focus"))?;
                    (w, Some(report), fb)
                }
                WeightingStrategy::ConsensusFocus => (
                    datasize_weights(&sizes, target.len()).map_err(wrap(&point, "weighting"))?,
                    None,
                    false,
                ),
                other => {
                    let ctx = BaselineContext {
                        source_sizes: sizes.clone(),
                        target_size: target.len(),
                        divergences: state.divergences.clone(),
                    };
                    (baseline_weights(other, &ctx).map_err(wrap(&point, "weighting"))?, None, false)
                }
            };

            let mut models: Vec<&ModelParams<f32>> = teachers_params.iter().collect();
            models.push(&student);
            let mut next = aggregate_params(&models, weights.as_slice()).map_err(wrap(&point, "aggregation"))?;
            if config.components.bn_mmd {
                match config.bn_mmd_mode {
                    BnMmdMode::ClosedForm => {
                        closed_form_bn_update(&mut next, &models, &weights).map_err(wrap(&point, "BatchNorm MMD"))?;
                    }
                    BnMmdMode::Gradient => {
                        let stats = models
                            .iter()
                            .map(|m| extract_bn_stats(*m))
                            .collect::<Result<Vec<_>>>()
                            .map_err(wrap(&point, "BatchNorm MMD"))?;
                        next = bn_mmd_gradient_stage(
                            &next,
                            &config.arch,
                            target,
                            &stats,
                            &weights,
                            &settings_for(target.len(), u64::MAX - 1),
                        )
                        .map_err(wrap(&point, "BatchNorm MMD"))?
                        .0;
                    }
                }
            }

            let student_model = Classifier::from_params(config.arch.clone(), &student)
                .map_err(wrap(&point, "diagnostics"))?;
            let probe: Vec<usize> = (0..target.len().min(KD_PAIR_SAMPLES)).collect();
            let probs = student_model
                .predict_proba(&target.inputs().select_rows(&probe))
                .map_err(wrap(&point, "diagnostics"))?;
            let kd_pairs = probe
                .iter()
                .map(|&i| (domain.items[i].p.clone(), probs.row(i).to_vec()))
                .collect();

            state.global = next;
            RoundRecord {
                sync: point.index,
                epoch_position: point.start,
                lr,
                gate,
                source_losses,
                kv_loss: kv_stats.mean_loss(),
                cf,
                cf_fallback,
                weights,
                fallback_fraction: domain.fallback_fraction(),
                kd_pairs,
                extended_inputs_are_target: Some(std::ptr::eq(domain.inputs, target.inputs())),
            }
        }
    };

    state.gate = gate;
    state.weights = Some(record.weights.clone());
    state.source_params = teachers_params;
    state.syncs_done += 1;
    state.history.push(record);
    Ok(state)
}

/// One row per completed epoch in which the global model changed.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub target_accuracy: f64,
    /// K + 1 domain weights (the last slot is the extended domain).
    pub alpha: Vec<f64>,
    /// Raw consensus-focus values, empty when not computed.
    pub cf_raw: Vec<f64>,
    pub source_loss: f64,
    pub kv_loss: f64,
    pub gate: f64,
    pub lr: f64,
    pub fallback_fraction: f64,
    pub uploads: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub num_sources: usize,
    pub rows: Vec<MetricsRow>,
    /// False when the weighting read raw source data.
    pub decentralized: bool,
}

impl Metrics {
    pub fn final_accuracy(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.target_accuracy)
    }

    pub fn final_alpha(&self) -> &[f64] {
        self.rows.last().map_or(&[], |r| r.alpha.as_slice())
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub model: ModelParams<f32>,
    pub metrics: Metrics,
    pub log: CommunicationLog,
    pub history: Vec<RoundRecord>,
}

impl TrainingOutcome {
    pub fn upload_size(&self) -> usize {
        encoded_len(&self.model)
    }
}

/// Runs the full schedule and records metrics after every completed epoch.
pub fn run_training(
    config: &RoundConfig,
    silos: &[SourceSilo],
    target: &UnlabeledDataset,
) -> Result<TrainingOutcome> {
    let mut state = RoundState::init(config, silos, target)?;
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let schedule = sync_schedule(config.epochs, config.rounds);
    let mut rows = Vec::new();
    for point in &schedule {
        state = kd3a_round(state, silos, target, config)?;
        let Some(epoch) = point.closes_epoch else {
            continue;
        };
        let record = state.history.last().expect("round recorded");
        let model = Classifier::from_params(config.arch.clone(), &state.global)?;
        let accuracy = target.evaluate(&model)?;
        let losses = &record.source_losses;
        rows.push(MetricsRow {
            epoch,
            target_accuracy: accuracy,
            alpha: record.weights.as_slice().to_vec(),
            cf_raw: record.cf.as_ref().map(|c| c.cf_raw.clone()).unwrap_or_default(),
            source_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            kv_loss: record.kv_loss,
            gate: record.gate,
            lr: record.lr,
            fallback_fraction: record.fallback_fraction,
            uploads: state.log.uploads(),
            bytes: state.log.total_bytes(),
        });
        if let Some(dir) = &config.checkpoint_dir {
            let path = dir.join(format!("epoch_{epoch}.kd3a"));
            std::fs::write(&path, crate::nn::encode(&state.global)).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(TrainingOutcome {
        model: state.global,
        metrics: Metrics {
            num_sources: silos.len(),
            rows,
            decentralized: !(config.method == Method::Kd3a && config.weighting.breaks_decentralization()),
        },
        log: state.log,
        history: state.history,
    })
}
