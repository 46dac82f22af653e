//! `kd3a`: run strategy comparisons, ablations and diagnostics on the
//! synthetic multi-source benchmark.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kd3a_core::harness::{
    ablation, default_ablation_subsets, diagnose, parse_bn_mode, run_cell, run_experiment, ExperimentConfig, Scenario,
    Strategy,
};

#[derive(Parser)]
#[command(name = "kd3a", version, about = "Decentralized multi-source domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare weighting strategies; writes per-run CSVs and a summary.
    Run(CommonArgs),
    /// Train the full method with each component removed in turn.
    Ablate(CommonArgs),
    /// Train one run per seed and check the Pinsker bound and the
    /// extended-domain input identity.
    Diagnose(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML file with [experiment], [benchmark] and [training] sections.
    /// Flags override values from the file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// clean, irrelevant, or malicious:<m> (also ma-<percent>).
    #[arg(long)]
    scenario: Option<String>,
    /// Comma-separated: kd3a, source-only, uniform, datasize, hdiv.
    #[arg(long, value_delimiter = ',')]
    strategy: Option<Vec<String>>,
    /// Comma-separated seeds, or a count `n` meaning seeds 0..n.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Communication rounds per epoch; 0.5 syncs every two epochs.
    #[arg(long)]
    r: Option<f64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Multiplier on every source shift.
    #[arg(long)]
    severity: Option<f64>,
    /// BatchNorm alignment: closed-form or gradient.
    #[arg(long)]
    bn_mode: Option<String>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.scenario {
            c.scenario = s.parse::<Scenario>()?;
        }
        if let Some(list) = &self.strategy {
            c.strategies = list.iter().map(|s| s.parse::<Strategy>()).collect::<Result<_, _>>()?;
        }
        if let Some(seeds) = &self.seeds {
            c.seeds = parse_seeds(seeds)?;
        }
        if let Some(out) = &self.out {
            c.out = out.clone();
        }
        if let Some(r) = self.r {
            c.training.rate = r;
        }
        if let Some(epochs) = self.epochs {
            c.training.epochs = epochs;
        }
        if let Some(severity) = self.severity {
            c.benchmark.severity = severity;
        }
        if let Some(mode) = &self.bn_mode {
            c.training.bn_mmd_mode = parse_bn_mode(mode)?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    if !text.contains(',') {
        let n: u64 = text.trim().parse().with_context(|| format!("bad seed list `{text}`"))?;
        return Ok((0..n).collect());
    }
    let seeds = text
        .split(',')
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed `{s}`")))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    Ok(seeds)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let started = Instant::now();
    match cli.command {
        Command::Run(args) => {
            let config = args.resolve()?;
            let report = run_experiment(&config)?;
            print!("{}", report.summary_markdown(&format!("{} scenario", config.scenario)));
            println!("\nwrote {}", config.out.display());
        }
        Command::Ablate(args) => {
            let config = args.resolve()?;
            let report = ablation(&config, &default_ablation_subsets())?;
            print!("{}", report.summary_markdown(&format!("ablation, {} scenario", config.scenario)));
            println!("\nwrote {}", config.out.join("ablation").display());
        }
        Command::Diagnose(args) => {
            let config = args.resolve()?;
            let strategy = config.strategies.first().copied().unwrap_or(Strategy::Kd3a);
            let mut failed = false;
            for &seed in &config.seeds {
                let round = config.round_config(strategy, seed)?;
                let (outcome, _) = run_cell(&config, &round, seed)?;
                let report = diagnose(&outcome.history);
                println!("seed {seed} ({strategy}):");
                print!("{}", report.render());
                failed |= !report.passed();
            }
            if failed {
                bail!("diagnostic violations found");
            }
        }
    }
    eprintln!("elapsed {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
