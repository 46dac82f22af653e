//! Experiment configuration, loadable from a sectioned TOML file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use super::scenario::{BenchmarkSpec, Scenario};
use crate::error::{Error, Result};
use crate::federation::{BnMmdMode, CommRounds, Components, Method, RoundConfig};
use crate::focus::WeightingStrategy;
use crate::nn::Architecture;

/// A row of a comparison: either the full method with some domain
/// weighting, or plain source-only averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Kd3a,
    SourceOnly,
    Uniform,
    DataSize,
    HDivergence,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Kd3a,
        Strategy::SourceOnly,
        Strategy::Uniform,
        Strategy::DataSize,
        Strategy::HDivergence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Kd3a => "kd3a",
            Strategy::SourceOnly => "source-only",
            Strategy::Uniform => "uniform",
            Strategy::DataSize => "datasize",
            Strategy::HDivergence => "hdiv",
        }
    }

    pub fn method(self) -> Method {
        match self {
            Strategy::SourceOnly => Method::SourceOnly,
            _ => Method::Kd3a,
        }
    }

    pub fn weighting(self) -> WeightingStrategy {
        match self {
            Strategy::Kd3a | Strategy::SourceOnly => WeightingStrategy::ConsensusFocus,
            Strategy::Uniform => WeightingStrategy::Uniform,
            Strategy::DataSize => WeightingStrategy::DataSize,
            Strategy::HDivergence => WeightingStrategy::HDivergence,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kd3a" | "cf" => Ok(Strategy::Kd3a),
            "source-only" | "source_only" | "fedavg" => Ok(Strategy::SourceOnly),
            "uniform" => Ok(Strategy::Uniform),
            "datasize" => Ok(Strategy::DataSize),
            "hdiv" => Ok(Strategy::HDivergence),
            other => Err(Error::UnknownStrategy(other.to_string())),
        }
    }
}

/// Training hyperparameters shared by every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSettings {
    pub epochs: usize,
    /// Communication rounds per epoch; below one means one sync every
    /// `1 / r` epochs.
    pub rate: f64,
    pub gate_lo: f64,
    pub gate_hi: f64,
    pub lr_hi: f64,
    pub lr_lo: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub width: usize,
    pub bn_mmd_mode: BnMmdMode,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self {
            epochs: 30,
            rate: 1.0,
            gate_lo: 0.8,
            gate_hi: 0.95,
            lr_hi: 0.05,
            lr_lo: 0.001,
            momentum: 0.9,
            batch_size: 32,
            width: 32,
            bn_mmd_mode: BnMmdMode::Gradient,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub benchmark: BenchmarkSpec,
    pub training: TrainingSettings,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Clean,
            benchmark: BenchmarkSpec::default(),
            training: TrainingSettings::default(),
            strategies: vec![Strategy::Kd3a, Strategy::SourceOnly],
            seeds: (0..5).collect(),
            out: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::InvalidConfig("at least one strategy is required".into()));
        }
        self.benchmark.validate()?;
        self.round_config(Strategy::Kd3a, 0)?.validate()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::mlp(self.benchmark.input_dim, self.training.width, self.benchmark.num_classes)
    }

    /// Round configuration of one `(strategy, seed)` cell.
    pub fn round_config(&self, strategy: Strategy, seed: u64) -> Result<RoundConfig> {
        let t = &self.training;
        let mut rc = RoundConfig::new(self.architecture(), seed);
        rc.epochs = t.epochs;
        rc.rounds = CommRounds::from_rate(t.rate)?;
        rc.gate_lo = t.gate_lo;
        rc.gate_hi = t.gate_hi;
        rc.lr_hi = t.lr_hi;
        rc.lr_lo = t.lr_lo;
        rc.momentum = t.momentum;
        rc.batch_size = t.batch_size;
        rc.bn_mmd_mode = t.bn_mmd_mode;
        rc.method = strategy.method();
        rc.weighting = strategy.weighting();
        rc.components = Components::ALL;
        Ok(rc)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ConfigFile =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        file.into_config()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    experiment: ExperimentSection,
    #[serde(default)]
    benchmark: BenchmarkSection,
    #[serde(default)]
    training: TrainingSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentSection {
    scenario: Option<String>,
    strategies: Option<Vec<String>>,
    seeds: Option<Vec<u64>>,
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchmarkSection {
    num_classes: Option<usize>,
    input_dim: Option<usize>,
    source_size: Option<usize>,
    target_size: Option<usize>,
    noise: Option<f64>,
    mean_spread: Option<f64>,
    mean_offset: Option<f64>,
    source_angles: Option<Vec<f64>>,
    source_offsets: Option<Vec<f64>>,
    severity: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingSection {
    epochs: Option<usize>,
    rate: Option<f64>,
    gate_lo: Option<f64>,
    gate_hi: Option<f64>,
    lr_hi: Option<f64>,
    lr_lo: Option<f64>,
    momentum: Option<f64>,
    batch_size: Option<usize>,
    width: Option<usize>,
    bn_mmd_mode: Option<String>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl ConfigFile {
    fn into_config(self) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::default();
        let e = self.experiment;
        if let Some(s) = e.scenario {
            c.scenario = s.parse()?;
        }
        if let Some(list) = e.strategies {
            c.strategies = list.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        }
        set(&mut c.seeds, e.seeds);
        set(&mut c.out, e.out);

        let b = self.benchmark;
        let bench = &mut c.benchmark;
        set(&mut bench.num_classes, b.num_classes);
        set(&mut bench.input_dim, b.input_dim);
        set(&mut bench.source_size, b.source_size);
        set(&mut bench.target_size, b.target_size);
        set(&mut bench.noise, b.noise);
        set(&mut bench.mean_spread, b.mean_spread);
        set(&mut bench.mean_offset, b.mean_offset);
        set(&mut bench.source_angles, b.source_angles);
        set(&mut bench.source_offsets, b.source_offsets);
        set(&mut bench.severity, b.severity);

        let t = self.training;
        let tr = &mut c.training;
        set(&mut tr.epochs, t.epochs);
        set(&mut tr.rate, t.rate);
        set(&mut tr.gate_lo, t.gate_lo);
        set(&mut tr.gate_hi, t.gate_hi);
        set(&mut tr.lr_hi, t.lr_hi);
        set(&mut tr.lr_lo, t.lr_lo);
        set(&mut tr.momentum, t.momentum);
        set(&mut tr.batch_size, t.batch_size);
        set(&mut tr.width, t.width);
        if let Some(mode) = t.bn_mmd_mode {
            tr.bn_mmd_mode = parse_bn_mode(&mode)?;
        }
        c.validate()?;
        Ok(c)
    }
}

pub fn parse_bn_mode(s: &str) -> Result<BnMmdMode> {
    match s {
        "closed-form" | "closed_form" => Ok(BnMmdMode::ClosedForm),
        "gradient" => Ok(BnMmdMode::Gradient),
        other => Err(Error::InvalidConfig(format!("unknown BatchNorm mode `{other}`"))),
    }
}
