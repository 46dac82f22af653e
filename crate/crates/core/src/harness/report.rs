//! CSV and Markdown writers for per-run metrics and cross-seed summaries.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::federation::Metrics;
use crate::vote::ConsensusItem;

/// Per-run CSV: one row per completed epoch. `alpha_ext` is the extended
/// domain slot.
pub fn metrics_csv(metrics: &Metrics) -> String {
    let k = metrics.num_sources;
    let mut header = vec!["epoch".to_string(), "target_accuracy".to_string()];
    header.extend((0..k).map(|i| format!("alpha_{i}")));
    header.push("alpha_ext".into());
    header.extend((0..k).map(|i| format!("cf_raw_{i}")));
    header.extend(
        ["source_loss", "kv_loss", "gate", "lr", "fallback_fraction", "uploads", "bytes"]
            .map(String::from),
    );
    let mut out = header.join(",");
    out.push('\n');
    for row in &metrics.rows {
        let mut cells = vec![row.epoch.to_string(), row.target_accuracy.to_string()];
        cells.extend(row.alpha.iter().map(f64::to_string));
        if row.cf_raw.is_empty() {
            cells.extend(std::iter::repeat_n(String::new(), k));
        } else {
            cells.extend(row.cf_raw.iter().map(f64::to_string));
        }
        cells.extend([
            row.source_loss.to_string(),
            row.kv_loss.to_string(),
            row.gate.to_string(),
            row.lr.to_string(),
            row.fallback_fraction.to_string(),
            row.uploads.to_string(),
            row.bytes.to_string(),
        ]);
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Consensus items as CSV: `p_0..p_{C-1},n_p`, one row per target sample.
pub fn consensus_items_csv(items: &[ConsensusItem]) -> String {
    let classes = items.first().map_or(0, |i| i.p.len());
    let mut out: Vec<String> = (0..classes).map(|c| format!("p_{c}")).collect();
    out.push("n_p".into());
    let mut text = out.join(",");
    text.push('\n');
    for item in items {
        let mut cells: Vec<String> = item.p.iter().map(f64::to_string).collect();
        cells.push(item.support.to_string());
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    text
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One summary row: a strategy or component subset aggregated over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    /// Final weight of every domain (K sources then the extended slot).
    pub alpha_mean: Vec<f64>,
    pub alpha_std: Vec<f64>,
    pub uploads: usize,
    pub bytes: usize,
    pub decentralized: bool,
}

impl SummaryRow {
    pub fn from_runs(name: &str, runs: &[&Metrics]) -> Self {
        let accuracies: Vec<f64> = runs.iter().map(|m| m.final_accuracy()).collect();
        let (accuracy_mean, accuracy_std) = mean_std(&accuracies);
        let slots = runs.first().map_or(0, |m| m.final_alpha().len());
        let (alpha_mean, alpha_std) = (0..slots)
            .map(|j| {
                let v: Vec<f64> = runs.iter().map(|m| m.final_alpha()[j]).collect();
                mean_std(&v)
            })
            .unzip();
        let last = runs.first().and_then(|m| m.rows.last());
        Self {
            name: name.to_string(),
            seeds: runs.len(),
            accuracy_mean,
            accuracy_std,
            alpha_mean,
            alpha_std,
            uploads: last.map_or(0, |r| r.uploads),
            bytes: last.map_or(0, |r| r.bytes),
            decentralized: runs.iter().all(|m| m.decentralized),
        }
    }
}

pub fn summary_csv(rows: &[SummaryRow], num_sources: usize) -> String {
    let mut header = vec![
        "name".to_string(),
        "seeds".into(),
        "accuracy_mean".into(),
        "accuracy_std".into(),
    ];
    for i in 0..num_sources {
        header.push(format!("alpha_{i}_mean"));
        header.push(format!("alpha_{i}_std"));
    }
    header.extend(["alpha_ext_mean", "alpha_ext_std", "uploads", "bytes", "decentralized"].map(String::from));
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let mut cells = vec![
            row.name.clone(),
            row.seeds.to_string(),
            row.accuracy_mean.to_string(),
            row.accuracy_std.to_string(),
        ];
        for j in 0..=num_sources {
            cells.push(row.alpha_mean.get(j).map_or(String::new(), f64::to_string));
            cells.push(row.alpha_std.get(j).map_or(String::new(), f64::to_string));
        }
        cells.extend([row.uploads.to_string(), row.bytes.to_string(), row.decentralized.to_string()]);
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Markdown table of accuracies, plus the bad domain's final weight when
/// the scenario has one.
pub fn summary_markdown(title: &str, rows: &[SummaryRow], bad_source: Option<usize>) -> String {
    let mut out = format!("# {title}\n\n");
    match bad_source {
        Some(k) => {
            let _ = writeln!(out, "| name | target accuracy (%) | alpha of domain {k} | decentralized |");
            out.push_str("|---|---|---|---|\n");
        }
        None => {
            out.push_str("| name | target accuracy (%) | decentralized |\n");
            out.push_str("|---|---|---|\n");
        }
    }
    for row in rows {
        let acc = format!("{:.2} ± {:.2}", 100.0 * row.accuracy_mean, 100.0 * row.accuracy_std);
        match bad_source {
            Some(k) => {
                let alpha = row
                    .alpha_mean
                    .get(k)
                    .map_or("-".to_string(), |a| format!("{a:.4} ± {:.4}", row.alpha_std[k]));
                let _ = writeln!(out, "| {} | {acc} | {alpha} | {} |", row.name, row.decentralized);
            }
            None => {
                let _ = writeln!(out, "| {} | {acc} | {} |", row.name, row.decentralized);
            }
        }
    }
    out
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consensus_dump_has_one_row_per_item() {
        let items = vec![
            ConsensusItem::new(vec![0.75, 0.25], 2.0).unwrap(),
            ConsensusItem::new(vec![0.5, 0.5], 0.001).unwrap(),
        ];
        assert_eq!(consensus_items_csv(&items), "p_0,p_1,n_p\n0.75,0.25,2\n0.5,0.5,0.001\n");
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }
}
