//! Experiment runner: builds the benchmark for a scenario, trains every
//! `(strategy, seed)` cell, and writes per-run and summary metrics.

pub mod config;
pub mod report;
pub mod scenario;

use std::path::PathBuf;

use rayon::prelude::*;

pub use config::{parse_bn_mode, ExperimentConfig, Strategy, TrainingSettings};
pub use report::{consensus_items_csv, mean_std, metrics_csv, summary_csv, summary_markdown, SummaryRow};
pub use scenario::{build_domains, BenchmarkSpec, Domains, Scenario};

use crate::error::Result;
use crate::federation::{run_training, Components, RoundConfig, RoundRecord, SourceSilo, TrainingOutcome};
use crate::nn::kl_divergence;
use crate::rng::derive_seed;
use report::write_text;

/// Margin below which a Pinsker check counts as satisfied.
pub const PINSKER_SLACK: f64 = 1e-12;

/// Trains one cell. The benchmark instance and the training seed depend on
/// `seed` only, so every strategy sees the same data and initialization.
pub fn run_cell(config: &ExperimentConfig, round: &RoundConfig, seed: u64) -> Result<(TrainingOutcome, Domains)> {
    let domains = build_domains(&config.benchmark, config.scenario, seed)?;
    let silos: Vec<SourceSilo> = domains
        .sources
        .iter()
        .enumerate()
        .map(|(k, d)| SourceSilo::new(k, d.clone()))
        .collect();
    let mut round = round.clone();
    round.seed = derive_seed(seed, &[0x7a1]);
    let outcome = run_training(&round, &silos, &domains.target)?;
    Ok((outcome, domains))
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub name: String,
    pub seed: u64,
    pub outcome: TrainingOutcome,
    pub diagnostics: DiagnosticReport,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub scenario: Scenario,
    pub num_sources: usize,
    pub bad_source: Option<usize>,
    pub cells: Vec<Cell>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentReport {
    pub fn row(&self, name: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.name == name)
    }

    pub fn cells_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Cell> + 'a {
        self.cells.iter().filter(move |c| c.name == name)
    }

    pub fn summary_csv(&self) -> String {
        summary_csv(&self.summary, self.num_sources)
    }

    pub fn summary_markdown(&self, title: &str) -> String {
        summary_markdown(title, &self.summary, self.bad_source)
    }
}

fn run_grid(config: &ExperimentConfig, variants: &[(String, RoundConfig)]) -> Result<ExperimentReport> {
    config.validate()?;
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| config.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<(Cell, Option<usize>)> = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let (name, round) = &variants[v];
            let (outcome, domains) = run_cell(config, round, seed)?;
            let diagnostics = diagnose(&outcome.history);
            Ok((
                Cell {
                    name: name.clone(),
                    seed,
                    outcome,
                    diagnostics,
                },
                domains.bad_source,
            ))
        })
        .collect::<Result<_>>()?;
    let bad_source = results.first().and_then(|(_, b)| *b);
    let cells: Vec<Cell> = results.into_iter().map(|(c, _)| c).collect();
    let num_sources = cells.first().map_or(0, |c| c.outcome.metrics.num_sources);
    let summary = variants
        .iter()
        .map(|(name, _)| {
            let runs: Vec<_> = cells.iter().filter(|c| &c.name == name).map(|c| &c.outcome.metrics).collect();
            SummaryRow::from_runs(name, &runs)
        })
        .collect();
    Ok(ExperimentReport {
        scenario: config.scenario,
        num_sources,
        bad_source,
        cells,
        summary,
    })
}

fn write_grid(report: &ExperimentReport, dir: &PathBuf, title: &str) -> Result<()> {
    for cell in &report.cells {
        let path = dir.join("runs").join(format!("{}_seed{}.csv", cell.name, cell.seed));
        write_text(&path, &metrics_csv(&cell.outcome.metrics))?;
    }
    write_text(&dir.join("summary.csv"), &report.summary_csv())?;
    write_text(&dir.join("summary.md"), &report.summary_markdown(title))
}

/// Compares the configured strategies over all seeds without touching the
/// filesystem.
pub fn compare_strategies(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let variants = config
        .strategies
        .iter()
        .map(|&s| Ok((s.name().to_string(), config.round_config(s, 0)?)))
        .collect::<Result<Vec<_>>>()?;
    run_grid(config, &variants)
}

/// Runs the strategy comparison and writes `runs/{strategy}_seed{s}.csv`,
/// `summary.csv` and `summary.md` under the output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let report = compare_strategies(config)?;
    write_grid(&report, &config.out, &format!("{} scenario", config.scenario))?;
    Ok(report)
}

/// The full method, each single component removed, and all removed.
pub fn default_ablation_subsets() -> Vec<Components> {
    let all = Components::ALL;
    vec![
        all,
        Components {
            knowledge_vote: false,
            ..all
        },
        Components {
            consensus_focus: false,
            ..all
        },
        Components { bn_mmd: false, ..all },
        Components::NONE,
    ]
}

/// Trains the full method with each component subset; one summary row per
/// subset, named by its enabled components.
pub fn compare_components(config: &ExperimentConfig, subsets: &[Components]) -> Result<ExperimentReport> {
    let variants = subsets
        .iter()
        .map(|&c| {
            let mut round = config.round_config(Strategy::Kd3a, 0)?;
            round.components = c;
            Ok((c.label(), round))
        })
        .collect::<Result<Vec<_>>>()?;
    run_grid(config, &variants)
}

/// Ablation with outputs written under `{out}/ablation`.
pub fn ablation(config: &ExperimentConfig, subsets: &[Components]) -> Result<ExperimentReport> {
    let report = compare_components(config, subsets)?;
    write_grid(&report, &config.out.join("ablation"), &format!("ablation, {} scenario", config.scenario))?;
    Ok(report)
}

/// Checks on logged training internals.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticReport {
    pub pinsker_pairs: usize,
    pub pinsker_violations: usize,
    /// Largest `|q_c - p_c| - sqrt(KL(p || q) / 2)` seen; never positive
    /// when the bound holds.
    pub max_pinsker_margin: f64,
    pub extended_domains_checked: usize,
    pub extended_domain_mismatches: usize,
}

impl DiagnosticReport {
    pub fn passed(&self) -> bool {
        self.pinsker_violations == 0 && self.extended_domain_mismatches == 0
    }

    pub fn render(&self) -> String {
        format!(
            "pinsker: {} pairs, {} violations, max margin {:.3e}\n\
             extended domain inputs: {} checked, {} not identical to target\n\
             status: {}\n",
            self.pinsker_pairs,
            self.pinsker_violations,
            self.max_pinsker_margin,
            self.extended_domains_checked,
            self.extended_domain_mismatches,
            if self.passed() { "ok" } else { "VIOLATIONS" },
        )
    }
}

/// Largest class-wise gap between `p` and `q` minus the Pinsker bound.
pub fn pinsker_margin(p: &[f64], q: &[f64]) -> f64 {
    let Ok(kl) = kl_divergence(p, q) else {
        return f64::INFINITY;
    };
    let bound = (kl / 2.0).sqrt();
    p.iter()
        .zip(q)
        .map(|(a, b)| (a - b).abs() - bound)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn diagnose(history: &[RoundRecord]) -> DiagnosticReport {
    let mut report = DiagnosticReport {
        pinsker_pairs: 0,
        pinsker_violations: 0,
        max_pinsker_margin: f64::NEG_INFINITY,
        extended_domains_checked: 0,
        extended_domain_mismatches: 0,
    };
    for record in history {
        for (p, q) in &record.kd_pairs {
            let margin = pinsker_margin(p, q);
            report.pinsker_pairs += 1;
            report.max_pinsker_margin = report.max_pinsker_margin.max(margin);
            if margin > PINSKER_SLACK {
                report.pinsker_violations += 1;
            }
        }
        if let Some(identical) = record.extended_inputs_are_target {
            report.extended_domains_checked += 1;
            if !identical {
                report.extended_domain_mismatches += 1;
            }
        }
    }
    report
}
