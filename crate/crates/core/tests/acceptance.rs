//! End-to-end acceptance checks, one test per criterion. Each prints a single
//! `criterion N: PASS|FAIL` line to stderr, visible even when output is
//! captured.

mod common;

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::*;
use kd3a_core::bn_mmd::{bn_mmd_loss, bn_mmd_objective, closed_form_moments, BnStats, LayerMoments};
use kd3a_core::focus::{cf_values, datasize_weights, domain_weights_cf, DomainWeights};
use kd3a_core::harness::{
    compare_components, compare_strategies, run_experiment, ExperimentConfig, Scenario, Strategy,
};
use kd3a_core::federation::Components;
use kd3a_core::nn::{
    cross_entropy_grad, cross_entropy_loss, decode, encode, kl_divergence, weighted_kd_batch_loss,
    weighted_kd_grad, Architecture, Classifier, Matrix,
};
use kd3a_core::rng::{rng_from_seed, Rng};
use kd3a_core::vote::{knowledge_vote, ConsensusItem, TeacherPredictions};
use rand::Rng as _;

static SERIAL: Mutex<()> = Mutex::new(());

fn announce(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn within(start: Instant, limit: Duration) -> bool {
    start.elapsed() < limit
}

#[test]
fn criterion_01_knowledge_vote_matches_oracle() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = rng_from_seed(101);
    let gates = [0.5, 0.9, 0.95];
    let mut mismatches = 0;
    let mut fallbacks = 0;
    for case in 0..10_000 {
        let k = rng.random_range(1..=5);
        let c = rng.random_range(2..=4);
        let g = gates[case % 3];
        let rows: Vec<Vec<f64>> = (0..k).map(|_| dyadic_simplex(c, &mut rng)).collect();
        let expected = oracle_vote(&rows, g);
        let got = knowledge_vote(&TeacherPredictions::new(rows).unwrap(), g);
        if got.p != expected.p || got.support != expected.support {
            mismatches += 1;
        }
        if got.is_fallback() {
            fallbacks += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && elapsed < Duration::from_secs(10) && fallbacks > 0;
    announce(
        1,
        pass,
        &format!("10000 sets, {mismatches} mismatches, {fallbacks} fallbacks, {:.2}s", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_02_consensus_focus_matches_oracle() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = rng_from_seed(202);
    let mut worst: f64 = 0.0;
    let cases = 2000;
    for case in 0..cases {
        let k = rng.random_range(2..=4);
        let classes = rng.random_range(2..=4);
        let n_t = rng.random_range(1..=20);
        let g = [0.5, 0.7, 0.9, 0.95][case % 4];
        let outputs: Vec<Matrix> = (0..k)
            .map(|_| {
                let rows: Vec<Vec<f64>> = (0..n_t)
                    .map(|_| {
                        if rng.random_bool(0.5) {
                            dyadic_simplex(classes, &mut rng)
                        } else {
                            random_simplex(classes, &mut rng)
                        }
                    })
                    .collect();
                Matrix::from_rows(&rows).unwrap()
            })
            .collect();
        let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(1..=500)).collect();
        let report = cf_values(&outputs, g).unwrap();
        let (alpha, _) = domain_weights_cf(&report, &sizes, n_t).unwrap();
        let (cf, expected_alpha) = oracle_cf_alpha(&outputs, g, &sizes, n_t);
        for (a, b) in report.cf_raw.iter().zip(&cf) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in alpha.as_slice().iter().zip(&expected_alpha) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-9 && elapsed < Duration::from_secs(10);
    announce(
        2,
        pass,
        &format!("{cases} instances, max deviation {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

fn random_stats(layers: &[usize], rng: &mut Rng) -> BnStats {
    BnStats {
        layers: layers
            .iter()
            .map(|&c| {
                let first: Vec<f64> = (0..c).map(|_| 2.0 * normal(rng)).collect();
                let second = first.iter().map(|m| m * m + rng.random_range(0.05..3.0)).collect();
                LayerMoments { first, second }
            })
            .collect(),
    }
}

fn random_weights(n: usize, rng: &mut Rng) -> DomainWeights {
    let mut alpha = random_simplex(n, rng);
    let drift: f64 = alpha.iter().sum::<f64>() - 1.0;
    alpha[0] -= drift;
    DomainWeights::new(alpha).unwrap()
}

#[test]
fn criterion_03_closed_form_moments_are_optimal() {
    let _g = serial();
    let mut rng = rng_from_seed(303);
    let mut worst_grad: f64 = 0.0;
    let mut beaten = 0;
    for _ in 0..100 {
        let layer_count = rng.random_range(1..=3);
        let shape: Vec<usize> = (0..layer_count).map(|_| rng.random_range(1..=4)).collect();
        let domains = rng.random_range(2..=5);
        let sources: Vec<BnStats> = (0..domains).map(|_| random_stats(&shape, &mut rng)).collect();
        let weights = random_weights(domains, &mut rng);
        let optimum = closed_form_moments(&sources, &weights).unwrap().layers;
        let base = bn_mmd_objective(&optimum, &sources, &weights).unwrap();

        let h = 1e-5;
        let mut grad_sq = 0.0;
        for l in 0..optimum.len() {
            for which in 0..2 {
                for j in 0..optimum[l].channels() {
                    let eval = |delta: f64| {
                        let mut t = optimum.clone();
                        let slot = if which == 0 { &mut t[l].first } else { &mut t[l].second };
                        slot[j] += delta;
                        bn_mmd_objective(&t, &sources, &weights).unwrap()
                    };
                    grad_sq += ((eval(h) - eval(-h)) / (2.0 * h)).powi(2);
                }
            }
        }
        worst_grad = worst_grad.max(grad_sq.sqrt());

        for _ in 0..100 {
            let scale = 10f64.powf(rng.random_range(-4.0..0.5));
            let mut t = optimum.clone();
            for layer in &mut t {
                layer.first.iter_mut().for_each(|v| *v += scale * normal(&mut rng));
                layer.second.iter_mut().for_each(|v| *v += scale * normal(&mut rng));
            }
            if bn_mmd_objective(&t, &sources, &weights).unwrap() < base {
                beaten += 1;
            }
        }
    }
    let pass = worst_grad < 1e-6 && beaten == 0;
    announce(
        3,
        pass,
        &format!("100 instances, max gradient norm {worst_grad:.2e}, {beaten} perturbations below optimum"),
    );
    assert!(pass);
}

fn small_model(rng: &mut Rng) -> (Classifier, Matrix) {
    let input = rng.random_range(2..=4);
    let classes = rng.random_range(2..=4);
    let width = rng.random_range(3..=6);
    let mut model = Classifier::new(Architecture::mlp(input, width, classes), rng).unwrap();
    // non-identity BatchNorm
    for bn in model.params_mut().batch_norms_mut() {
        bn.gamma.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
        bn.beta.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    let batch = gaussian_matrix(rng.random_range(4..=8), input, 1.5, rng);
    (model, batch)
}

fn consensus_items(rows: usize, classes: usize, rng: &mut Rng) -> Vec<ConsensusItem> {
    (0..rows)
        .map(|_| {
            let p = random_simplex(classes, rng);
            let support = if rng.random_bool(0.2) { 0.001 } else { f64::from(rng.random_range(1..=4u32)) };
            ConsensusItem::new(p, support).unwrap()
        })
        .collect()
}

#[test]
fn criterion_04_gradients_match_finite_differences() {
    let _g = serial();
    let mut rng = rng_from_seed(404);
    let h = 1e-6;
    let mut worst = [0.0f64; 4];

    for _ in 0..50 {
        let (mut model, x) = small_model(&mut rng);
        let labels: Vec<usize> = (0..x.rows()).map(|_| rng.random_range(0..model.num_classes())).collect();
        let pass = model.forward_train(&x).unwrap();
        let dlogits = cross_entropy_grad(&pass.probs, &labels).unwrap();
        let analytic = trainable(&model.backward(&pass, &dlogits, None).unwrap());
        let numeric = fd_params(&model, h, |m| {
            cross_entropy_loss(&m.forward_train(&x).unwrap().probs, &labels).unwrap()
        });
        worst[0] = worst[0].max(relative_error(&analytic, &numeric));
    }

    for _ in 0..50 {
        let (mut model, x) = small_model(&mut rng);
        let items = consensus_items(x.rows(), model.num_classes(), &mut rng);
        let pass = model.forward_train(&x).unwrap();
        let dlogits = weighted_kd_grad(&items, &pass.probs).unwrap();
        let analytic = trainable(&model.backward(&pass, &dlogits, None).unwrap());
        let numeric = fd_params(&model, h, |m| {
            weighted_kd_batch_loss(&items, &m.forward_train(&x).unwrap().probs).unwrap()
        });
        worst[1] = worst[1].max(relative_error(&analytic, &numeric));
    }

    for _ in 0..50 {
        let layers = rng.random_range(1..=3);
        let rows = rng.random_range(2..=6);
        let channels: Vec<usize> = (0..layers).map(|_| rng.random_range(1..=4)).collect();
        let features: Vec<Matrix> = channels.iter().map(|&c| gaussian_matrix(rows, c, 1.5, &mut rng)).collect();
        let domains = rng.random_range(2..=4);
        let sources: Vec<BnStats> = (0..domains).map(|_| random_stats(&channels, &mut rng)).collect();
        let weights = random_weights(domains, &mut rng);
        let (_, grads) = bn_mmd_loss(&features, &sources, &weights).unwrap();
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
        let mut numeric = Vec::new();
        for l in 0..features.len() {
            for idx in 0..features[l].data().len() {
                let eval = |delta: f64| {
                    let mut f = features.clone();
                    f[l].data_mut()[idx] += delta;
                    bn_mmd_loss(&f, &sources, &weights).unwrap().0
                };
                numeric.push((eval(h) - eval(-h)) / (2.0 * h));
            }
        }
        worst[2] = worst[2].max(relative_error(&analytic, &numeric));
    }

    for _ in 0..50 {
        let (mut model, x) = small_model(&mut rng);
        let channels: Vec<usize> = model.params().batch_norms().map(|b| b.channels()).collect();
        let domains = rng.random_range(2..=4);
        let sources: Vec<BnStats> = (0..domains).map(|_| random_stats(&channels, &mut rng)).collect();
        let weights = random_weights(domains, &mut rng);
        let pass = model.forward_train(&x).unwrap();
        let (_, feature_grads) = bn_mmd_loss(&pass.bn_features, &sources, &weights).unwrap();
        let zero = Matrix::zeros(x.rows(), model.num_classes());
        let analytic = trainable(&model.backward(&pass, &zero, Some(&feature_grads)).unwrap());
        let numeric = fd_params(&model, h, |m| {
            bn_mmd_loss(&m.forward_train(&x).unwrap().bn_features, &sources, &weights).unwrap().0
        });
        worst[3] = worst[3].max(relative_error(&analytic, &numeric));
    }

    let pass = worst.iter().all(|&w| w < 1e-3);
    announce(
        4,
        pass,
        &format!(
            "max relative error: cross-entropy {:.1e}, weighted KD {:.1e}, moment loss (features) {:.1e}, moment loss (parameters) {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_pinsker_bound_holds() {
    let _g = serial();
    let mut rng = rng_from_seed(505);
    let mut violations = 0;
    for i in 0..1000 {
        let c = rng.random_range(2..=10);
        let p = random_simplex(c, &mut rng);
        let q = if i % 4 == 0 {
            // near-identical pairs probe the small-divergence regime
            let noise = random_simplex(c, &mut rng);
            p.iter().zip(&noise).map(|(a, b)| 0.99 * a + 0.01 * b).collect()
        } else {
            random_simplex(c, &mut rng)
        };
        let bound = (kl_divergence(&p, &q).unwrap() / 2.0).sqrt();
        if p.iter().zip(&q).any(|(a, b)| (a - b).abs() > bound) {
            violations += 1;
        }
    }
    announce(5, violations == 0, &format!("1000 pairs, {violations} violations"));
    assert_eq!(violations, 0);
}

fn clean_config(strategies: Vec<Strategy>) -> ExperimentConfig {
    ExperimentConfig {
        strategies,
        ..ExperimentConfig::default()
    }
}

#[test]
fn criterion_06_adaptation_beats_source_only() {
    let _g = serial();
    let start = Instant::now();
    let report = compare_strategies(&clean_config(vec![Strategy::Kd3a, Strategy::SourceOnly])).unwrap();
    let kd3a = report.row("kd3a").unwrap().accuracy_mean;
    let source_only = report.row("source-only").unwrap().accuracy_mean;
    let gain = 100.0 * (kd3a - source_only);
    let elapsed = start.elapsed();
    let pass = gain >= 3.0 && elapsed < Duration::from_secs(120);
    announce(
        6,
        pass,
        &format!(
            "kd3a {:.2}% vs source-only {:.2}%, gain {gain:.2} points over 5 seeds, {:.1}s",
            100.0 * kd3a,
            100.0 * source_only,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_malicious_domain_is_suppressed() {
    let _g = serial();
    let start = Instant::now();
    let config = ExperimentConfig {
        scenario: Scenario::Malicious(0.5),
        ..clean_config(vec![Strategy::Kd3a, Strategy::Uniform])
    };
    let report = compare_strategies(&config).unwrap();
    let bad = report.bad_source.expect("malicious scenario marks its source");
    let sizes = vec![config.benchmark.source_size; report.num_sources];
    let datasize = datasize_weights(&sizes, config.benchmark.target_size).unwrap().as_slice()[bad];
    let cf = report.row("kd3a").unwrap();
    let uniform = report.row("uniform").unwrap();
    let alpha_bad = cf.alpha_mean[bad];
    let low_weight = alpha_bad < 0.5 * datasize;
    let beats_uniform = cf.accuracy_mean > uniform.accuracy_mean;
    let elapsed = start.elapsed();
    let pass = low_weight && beats_uniform && within(start, Duration::from_secs(180));
    announce(
        7,
        pass,
        &format!(
            "malicious alpha {alpha_bad:.3} vs limit {:.3}; consensus focus {:.2}% vs uniform {:.2}%; {:.1}s",
            0.5 * datasize,
            100.0 * cf.accuracy_mean,
            100.0 * uniform.accuracy_mean,
            elapsed.as_secs_f64()
        ),
    );
    assert!(low_weight, "malicious weight {alpha_bad} not below half of {datasize}");
    assert!(beats_uniform, "consensus focus {} <= uniform {}", cf.accuracy_mean, uniform.accuracy_mean);
    assert!(within(start, Duration::from_secs(180)));
}

#[test]
fn criterion_08_full_method_beats_each_ablation() {
    let _g = serial();
    let all = Components::ALL;
    let subsets = [
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
    ];
    let report = compare_components(&clean_config(vec![Strategy::Kd3a]), &subsets).unwrap();
    let full = report.row(&all.label()).unwrap().accuracy_mean;
    let mut detail = format!("full {:.2}%", 100.0 * full);
    let mut pass = true;
    for subset in &subsets[1..] {
        let acc = report.row(&subset.label()).unwrap().accuracy_mean;
        detail.push_str(&format!(", {} {:.2}%", subset.label(), 100.0 * acc));
        pass &= full >= acc;
    }
    announce(8, pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_09_communication_accounting() {
    let _g = serial();
    let mut config = clean_config(vec![Strategy::Kd3a]);
    config.training.epochs = 40;
    let mut accuracy = Vec::new();
    let mut counts_ok = true;
    let mut detail = String::new();
    for rate in [0.2, 0.5, 1.0, 2.0] {
        config.training.rate = rate;
        let report = compare_strategies(&config).unwrap();
        let row = report.row("kd3a").unwrap();
        accuracy.push(row.accuracy_mean);
        for cell in &report.cells {
            let size = cell.outcome.upload_size();
            let log = &cell.outcome.log;
            let expected = (3.0 * 40.0 * rate).round() as usize;
            if rate == 1.0 {
                counts_ok &= log.uploads() == 120 && log.total_bytes() == 120 * size;
            }
            if rate == 0.5 {
                counts_ok &= log.uploads() == 60;
            }
            counts_ok &= log.uploads() == expected && log.total_bytes() == expected * size;
        }
        detail.push_str(&format!("r={rate}: {:.2}% ", 100.0 * row.accuracy_mean));
    }
    let drop = 100.0 * (accuracy[2] - accuracy[0]);
    let pass = counts_ok && drop < 5.0;
    announce(
        9,
        pass,
        &format!("uploads and bytes exact: {counts_ok}; {detail}; drop at r=0.2 vs r=1: {drop:.2} points"),
    );
    assert!(pass);
}

#[test]
fn criterion_10_determinism_and_wire_round_trip() {
    let _g = serial();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut config = clean_config(vec![Strategy::Kd3a, Strategy::SourceOnly]);
    config.seeds = vec![0, 1];
    config.training.epochs = 8;
    let mut outputs = Vec::new();
    for dir in &dirs {
        config.out = dir.path().to_path_buf();
        let report = run_experiment(&config).unwrap();
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.path().join("runs"))
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        files.push(("summary.csv".into(), std::fs::read(dir.path().join("summary.csv")).unwrap()));
        outputs.push((files, report));
    }
    let metrics_identical = outputs[0].0 == outputs[1].0 && outputs[0].0.len() == 5;

    let mut wire_ok = true;
    for cell in &outputs[0].1.cells {
        let bytes = encode(&cell.outcome.model);
        let back = decode(&bytes).unwrap();
        let same_bits = back
            .flatten()
            .iter()
            .zip(cell.outcome.model.flatten())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        wire_ok &= same_bits && encode(&back) == bytes && back.manifest() == cell.outcome.model.manifest();
    }
    let pass = metrics_identical && wire_ok;
    announce(
        10,
        pass,
        &format!("metrics files byte-identical: {metrics_identical}; wire round-trip bit-exact: {wire_ok}"),
    );
    assert!(pass);
}
