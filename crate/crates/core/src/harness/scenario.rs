//! Desk-scale benchmark: K shifted Gaussian-blob source domains sharing the
//! class geometry of an unshifted target, optionally with a bad source.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::synth::{
    as_target, corrupt_labels, generate_domain, make_irrelevant_domain, random_class_means, random_unit,
    DomainSpec, LabeledDataset, Shift, UnlabeledDataset,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scenario {
    Clean,
    /// An extra source with class-independent inputs far from the target.
    Irrelevant,
    /// The least-shifted source gets this fraction of wrong labels.
    Malicious(f64),
}

impl Scenario {
    pub fn label(&self) -> String {
        match self {
            Scenario::Clean => "clean".into(),
            Scenario::Irrelevant => "irrelevant".into(),
            Scenario::Malicious(m) => format!("malicious-{}", (m * 100.0).round()),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    /// Accepts `clean`, `irrelevant`, `malicious:0.3`, `ma-30`, `malicious-30`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "clean" => return Ok(Scenario::Clean),
            "irrelevant" | "ir" => return Ok(Scenario::Irrelevant),
            _ => {}
        }
        let bad = || Error::InvalidConfig(format!("unknown scenario `{s}`"));
        let rest = ["malicious:", "malicious-", "ma-", "ma"]
            .iter()
            .find_map(|p| s.strip_prefix(p))
            .ok_or_else(bad)?;
        let value: f64 = rest.parse().map_err(|_| bad())?;
        let m = if value > 1.0 { value / 100.0 } else { value };
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::InvalidFraction(m));
        }
        Ok(Scenario::Malicious(m))
    }
}

/// Geometry of the benchmark. Source `k` is the target geometry rotated by
/// `source_angles[k] * severity` radians and translated along a random
/// direction by `source_offsets[k] * severity`.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub source_size: usize,
    pub target_size: usize,
    pub noise: f64,
    pub mean_spread: f64,
    pub mean_offset: f64,
    pub source_angles: Vec<f64>,
    pub source_offsets: Vec<f64>,
    pub severity: f64,
}

impl Default for BenchmarkSpec {
    /// Three sources: two mild shifts and one strong.
    fn default() -> Self {
        Self {
            num_classes: 4,
            input_dim: 8,
            source_size: 400,
            target_size: 400,
            noise: 1.0,
            mean_spread: 1.5,
            mean_offset: 1.0,
            source_angles: vec![0.4, 0.6, 1.2],
            source_offsets: vec![0.5, 0.5, 1.5],
            severity: 1.0,
        }
    }
}

impl BenchmarkSpec {
    pub fn num_sources(&self) -> usize {
        self.source_angles.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_angles.len() != self.source_offsets.len() {
            return Err(Error::InvalidConfig(
                "source_angles and source_offsets differ in length".into(),
            ));
        }
        if self.source_angles.len() < 2 {
            return Err(Error::TooFewSources {
                required: 2,
                found: self.source_angles.len(),
            });
        }
        Ok(())
    }
}

/// Generated domains of one benchmark instance.
#[derive(Debug, Clone)]
pub struct Domains {
    pub sources: Vec<LabeledDataset>,
    pub target: UnlabeledDataset,
    /// Index of the irrelevant or malicious source, if any.
    pub bad_source: Option<usize>,
}

pub fn build_domains(bench: &BenchmarkSpec, scenario: Scenario, seed: u64) -> Result<Domains> {
    bench.validate()?;
    let mut rng = rng_from_seed(derive_seed(seed, &[0xbe9c]));
    let means = random_class_means(
        bench.num_classes,
        bench.input_dim,
        bench.mean_spread,
        bench.mean_offset,
        &mut rng,
    );
    let spec = |shift: Shift, n: usize, stream: u64| DomainSpec {
        num_classes: bench.num_classes,
        input_dim: bench.input_dim,
        class_means: means.clone(),
        covariance_scale: bench.noise,
        shift,
        sample_count: n,
        seed: derive_seed(seed, &[stream]),
    };
    let target_spec = spec(Shift::none(bench.input_dim), bench.target_size, 1000);
    let target = as_target(generate_domain(&target_spec)?);

    let mut sources = Vec::with_capacity(bench.num_sources() + 1);
    for (k, (&angle, &offset)) in bench.source_angles.iter().zip(&bench.source_offsets).enumerate() {
        let direction = random_unit(bench.input_dim, &mut rng);
        let shift = Shift {
            angle: angle * bench.severity,
            translation: direction.iter().map(|u| u * offset * bench.severity).collect(),
        };
        sources.push(generate_domain(&spec(shift, bench.source_size, k as u64))?);
    }

    let bad_source = match scenario {
        Scenario::Clean => None,
        Scenario::Irrelevant => {
            let ir = make_irrelevant_domain(
                &spec(Shift::none(bench.input_dim), bench.source_size, 2000),
                derive_seed(seed, &[2001]),
            )?;
            sources.push(ir);
            Some(sources.len() - 1)
        }
        Scenario::Malicious(m) => {
            let k = least_shifted(bench);
            sources[k] = corrupt_labels(&sources[k], m, derive_seed(seed, &[3000]))?;
            Some(k)
        }
    };
    Ok(Domains {
        sources,
        target,
        bad_source,
    })
}

fn least_shifted(bench: &BenchmarkSpec) -> usize {
    (0..bench.num_sources())
        .min_by(|&a, &b| bench.source_angles[a].abs().total_cmp(&bench.source_angles[b].abs()))
        .unwrap_or(0)
}
