//! End-to-end acceptance checks. Runs as a plain binary so every check
//! prints its own PASS/FAIL line; the process fails if any check fails.

mod common;

use std::time::{Duration, Instant};

use noisy_adapt::annotio::{corrupt_annotations, parse_voc, voc_universe, write_voc, VocDoc};
use noisy_adapt::diffcore::{dot, GradBundle, Matrix};
use noisy_adapt::eagr::{inner_loop, MetaObjective};
use noisy_adapt::evalkit::{average_precision, classify_overlap, ApMode, Detection, GroundTruth, TaxonomyCounts};
use noisy_adapt::gradsuite::{self, TOLERANCE};
use noisy_adapt::mgrm::{batch_prototypes, global_relation, mgrm_loss, BankUpdateRule, PrototypeBank, Prototypes};
use noisy_adapt::pim::{mine, PimConfig};
use noisy_adapt::rng::{stream, StreamRng};
use noisy_adapt::synthworld::{
    iou, noise_count, inject_label_noise, restore_labels, BBox, Dataset, Domain, NoiseOutcome, ScenarioConfig,
};
use noisy_adapt::trainer::{ablation_grid, standard_rows, train, ModuleFlags, TrainConfig};
use rand::Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn run(name: &str, budget: Duration, check: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = check();
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    let passed = out.passed && in_time;
    println!(
        "[{}] {name}: {} ({:.1}s of {:.0}s budget{})",
        if passed { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64(),
        budget.as_secs_f64(),
        if in_time { "" } else { ", over budget" }
    );
    passed
}

fn gradient_checks() -> Outcome {
    let results = gradsuite::run_suite(2024, 50).expect("gradient suite runs");
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    outcome(
        failing.is_empty(),
        format!(
            "{} ops x 50 instances, worst relative error {worst:.2e} (limit {TOLERANCE:.0e}){}",
            results.len(),
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(", ")) }
        ),
    )
}

fn mining_oracle() -> Outcome {
    let mut mismatches = 0;
    let mut mined = 0;
    for seed in 0..1000u64 {
        let mut rng = stream(seed, 11, 0);
        let domain = if seed % 2 == 0 { Domain::Source } else { Domain::Target };
        let scene = common::random_scene(&mut rng, domain, 100);
        let logits = Matrix::from_vec(100, 5, (0..500).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let tau = [0.5, 0.7, 0.9][(seed % 3) as usize];
        let cfg = PimConfig {
            tau_source: tau,
            tau_target: tau,
            max_mined_per_scene: if seed % 5 == 0 { 4 } else { 16 },
        };
        let got = mine(&scene, &logits, &cfg).unwrap();
        mined += got.len();
        if got != common::brute_force_mine(&scene, &logits, &cfg) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("1000 scenes, {mined} mined proposals, {mismatches} mismatches"))
}

fn random_features(rng: &mut StreamRng, n: usize, d: usize) -> Matrix {
    Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..2.0)).collect()).unwrap()
}

fn graph_identities() -> Outcome {
    let (c, d) = (4, 6);
    let mut rng = stream(5, 12, 0);
    let mut notes = Vec::new();
    let mut ok = true;

    // Noisy relations equal to the global ones give a zero loss.
    let mut bank = PrototypeBank::new(c, d);
    let labels: Vec<usize> = (0..c).collect();
    bank.update(&batch_prototypes(&random_features(&mut rng, c, d), &labels, c).unwrap(), Domain::Source, BankUpdateRule::Matched)
        .unwrap();
    bank.update(&batch_prototypes(&random_features(&mut rng, c, d), &labels, c).unwrap(), Domain::Target, BankUpdateRule::Matched)
        .unwrap();
    let pi = global_relation(&bank).unwrap();
    let same = mgrm_loss(&bank.source.values, &labels, &bank, &pi).unwrap();
    ok &= same.loss.abs() < 1e-12 && same.valid_entries == c * c;
    notes.push(format!("loss at Z=Pi {:.1e}", same.loss));

    // Scale invariance.
    let noisy = random_features(&mut rng, 10, d);
    let nl: Vec<usize> = (0..10).map(|i| i % c).collect();
    let base = mgrm_loss(&noisy, &nl, &bank, &pi).unwrap().loss;
    let mut worst: f64 = 0.0;
    for k in [0.1, 10.0] {
        let mut scaled = PrototypeBank::new(c, d);
        for domain in [Domain::Source, Domain::Target] {
            let beta = Prototypes {
                values: bank.domain(domain).values.scale(k),
                present: vec![true; c],
                counts: vec![1; c],
            };
            scaled.update(&beta, domain, BankUpdateRule::Matched).unwrap();
        }
        let pi_k = global_relation(&scaled).unwrap();
        worst = worst.max((mgrm_loss(&noisy.scale(k), &nl, &scaled, &pi_k).unwrap().loss - base).abs());
        for (a, b) in pi.values.values().iter().zip(pi_k.values.values()) {
            worst = worst.max((a - b).abs());
        }
    }
    ok &= worst < 1e-9;
    notes.push(format!("scale drift {worst:.1e}"));

    // Fixed point: feeding the bank its own slots changes nothing.
    let before = bank.clone();
    let beta = Prototypes {
        values: bank.source.values.clone(),
        present: vec![true; c],
        counts: vec![1; c],
    };
    bank.update(&beta, Domain::Source, BankUpdateRule::Matched).unwrap();
    let drift = before
        .source
        .values
        .values()
        .iter()
        .zip(bank.source.values.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ok &= drift < 1e-12;
    notes.push(format!("fixed-point drift {drift:.1e}"));

    // Separability: identical domains, orthogonal means, clean labels.
    let (c, d) = (5, 10);
    let mut bank = PrototypeBank::new(c, d);
    let unit = Normal::new(0.0, 0.3).unwrap();
    for _ in 0..50 {
        for domain in [Domain::Source, Domain::Target] {
            let labels: Vec<usize> = (0..20).map(|i| i % c).collect();
            let f: Vec<f64> = labels
                .iter()
                .flat_map(|&l| (0..d).map(move |j| if j == 2 * l { 3.0 } else { 0.0 }))
                .map(|m| m + unit.sample(&mut rng))
                .collect();
            let f = Matrix::from_vec(20, d, f).unwrap();
            bank.update(&batch_prototypes(&f, &labels, c).unwrap(), domain, BankUpdateRule::Matched).unwrap();
        }
    }
    let pi = global_relation(&bank).unwrap();
    let diagonal = (0..c).all(|u| (0..c).all(|v| v == u || pi.get(u, u).unwrap() > pi.get(u, v).unwrap()));
    ok &= diagonal;
    notes.push(format!("diagonal strict row max after 50 updates: {diagonal}"));
    outcome(ok, notes.join(", "))
}

/// Two batches of `½θᵀAθ − bᵀθ + (q/4)Σθ⁴`.
struct QuarticPair {
    theta: Vec<f64>,
    a: [Matrix; 2],
    b: [Vec<f64>; 2],
    q: f64,
}

impl QuarticPair {
    fn grad_at(&self, k: usize, theta: &[f64]) -> Vec<f64> {
        (0..theta.len())
            .map(|i| dot(self.a[k].row(i), theta) - self.b[k][i] + self.q * theta[i].powi(3))
            .collect()
    }

    fn hessian_times(&self, k: usize, theta: &[f64], v: &[f64]) -> Vec<f64> {
        (0..theta.len())
            .map(|i| dot(self.a[k].row(i), v) + 3.0 * self.q * theta[i].powi(2) * v[i])
            .collect()
    }
}

impl MetaObjective for QuarticPair {
    fn params(&self) -> Vec<f64> {
        self.theta.clone()
    }
    fn set_params(&mut self, params: &[f64]) -> noisy_adapt::Result<()> {
        self.theta = params.to_vec();
        Ok(())
    }
    fn gradient(&mut self, step: usize) -> noisy_adapt::Result<GradBundle> {
        Ok(GradBundle {
            grad: self.grad_at(step % 2, &self.theta),
            loss: 0.0,
        })
    }
}

fn random_spd(rng: &mut StreamRng, n: usize) -> Matrix {
    let m = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    m.t_matmul(&m).unwrap().add(&Matrix::identity(n)).unwrap()
}

fn expansion_residual(p: &QuarticPair, alpha: f64) -> f64 {
    let theta0 = p.theta.clone();
    let mut run = QuarticPair {
        theta: theta0.clone(),
        a: p.a.clone(),
        b: p.b.clone(),
        q: p.q,
    };
    let out = inner_loop(&mut run, 2, alpha).unwrap();
    let g1 = p.grad_at(0, &theta0);
    let g2 = p.grad_at(1, &theta0);
    let h2g1 = p.hessian_times(1, &theta0, &g1);
    let r: Vec<f64> = (0..theta0.len())
        .map(|i| (out.before[i] - out.after[i]) / alpha - g1[i] - g2[i] + alpha * h2g1[i])
        .collect();
    dot(&r, &r).sqrt()
}

fn meta_expansion() -> Outcome {
    let mut ratios = Vec::new();
    for k in 0..20u32 {
        let mut rng = stream(77, 13, k);
        let n = 8;
        let p = QuarticPair {
            theta: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            a: [random_spd(&mut rng, n), random_spd(&mut rng, n)],
            b: [
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ],
            q: rng.random_range(0.5..2.0),
        };
        ratios.push(expansion_residual(&p, 1e-3) / expansion_residual(&p, 5e-4));
    }
    let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().cloned().fold(0.0, f64::max);
    outcome(
        (3.0..=5.0).contains(&lo) && (3.0..=5.0).contains(&hi),
        format!("20 problems, residual shrink ratio in [{lo:.3}, {hi:.3}]"),
    )
}

fn noise_protocol() -> Outcome {
    let cfg = ScenarioConfig::default();
    let clean = Dataset::generate(&cfg).unwrap().source;
    let n: usize = clean.iter().map(|s| s.objects.len()).sum();
    let mut ok = true;
    let mut counts = Vec::new();
    for (i, rho) in [0.0, 0.2, 0.4, 0.6, 0.8].into_iter().enumerate() {
        let (noisy, log) = inject_label_noise(&clean, rho, 10 + i as u64, cfg.categories, true).unwrap();
        ok &= log.len() == noise_count(rho, n) && log.len() == (rho * n as f64).round() as usize;
        ok &= restore_labels(&noisy, &log).unwrap() == clean;
        counts.push(log.len().to_string());
    }
    // Background share over at least 10⁴ corruptions.
    let big = ScenarioConfig {
        scenes_per_domain: 2500,
        ..ScenarioConfig::default()
    };
    let scenes = Dataset::generate(&big).unwrap().source;
    let (_, log) = inject_label_noise(&scenes, 1.0, 3, big.categories, true).unwrap();
    let total = log.len() as f64;
    let removed = log.entries.iter().filter(|e| e.outcome == NoiseOutcome::Removed).count() as f64;
    let p = 1.0 / big.categories as f64;
    let sd = (p * (1.0 - p) / total).sqrt();
    let z = (removed / total - p) / sd;
    ok &= total >= 1e4 && z.abs() <= 3.0;
    outcome(
        ok,
        format!(
            "counts {} of {n}; background share {:.4} over {total} corruptions (z = {z:.2}); restores exactly",
            counts.join("/"),
            removed / total
        ),
    )
}

fn ap_oracle_and_taxonomy() -> Outcome {
    let mut worst: f64 = 0.0;
    for k in 0..200u32 {
        let mut rng = stream(31, 14, k);
        let gts: Vec<GroundTruth> = (0..rng.random_range(1..5))
            .map(|_| GroundTruth {
                image: rng.random_range(0..2),
                bbox: common::random_box(&mut rng, 12),
                category: 0,
            })
            .collect();
        let dets: Vec<Detection> = (0..rng.random_range(0..7))
            .map(|i| Detection {
                image: rng.random_range(0..2),
                bbox: if rng.random_bool(0.5) { gts[rng.random_range(0..gts.len())].bbox } else { common::random_box(&mut rng, 12) },
                category: 0,
                score: 10.0 - i as f64 + rng.random_range(0.0..0.5),
            })
            .collect();
        let ap = average_precision(&dets, &gts, 0, 0.5, ApMode::AllPoint).unwrap();
        worst = worst.max((ap - common::enumerated_ap(&dets, &gts, 0, 0.5).unwrap()).abs());
    }
    let gt = BBox::new(0.0, 0.0, 10.0, 100.0).unwrap();
    let mut bins = Vec::new();
    for h in [29.0, 30.0, 49.0, 50.0] {
        let mut counts = TaxonomyCounts::default();
        classify_overlap(iou(&gt, &BBox::new(0.0, 0.0, 10.0, h).unwrap()), &mut counts);
        bins.push((counts.correct, counts.mislocalized, counts.background));
    }
    let expected = vec![(0, 0, 1), (0, 1, 0), (0, 1, 0), (1, 0, 0)];
    outcome(
        worst <= 1e-9 && bins == expected,
        format!("200 cases, max |AP - oracle| {worst:.1e}; IoU 0.29/0.30/0.49/0.50 -> background/mislocalized/mislocalized/correct: {}", bins == expected),
    )
}

fn end_to_end() -> Outcome {
    let noisy = TrainConfig {
        scenario: ScenarioConfig {
            noise_rate: 0.4,
            ..ScenarioConfig::default()
        },
        grad_report: false,
        ..TrainConfig::default()
    };
    let rows = ablation_grid(&noisy, &standard_rows(), 5).unwrap();
    let mean = |name: &str| 100.0 * rows.iter().find(|r| r.name == name).unwrap().mean;
    let (base, full) = (mean("baseline"), mean("full"));
    let gain_ok = full >= base + 2.0;
    let worst_other = rows.iter().filter(|r| r.name != "full").map(|r| 100.0 * r.mean).fold(f64::MIN, f64::max);
    let dominance_ok = full >= worst_other;

    let clean = TrainConfig {
        scenario: ScenarioConfig {
            noise_rate: 0.0,
            ..ScenarioConfig::default()
        },
        ..noisy.clone()
    };
    let pair = [standard_rows()[0].clone(), standard_rows()[4].clone()];
    let clean_rows = ablation_grid(&clean, &pair, 5).unwrap();
    let (cb, cf) = (100.0 * clean_rows[0].mean, 100.0 * clean_rows[1].mean);
    let clean_ok = (cf - cb).abs() <= 1.0;
    let table: Vec<String> = rows.iter().map(|r| format!("{} {:.2}", r.name, 100.0 * r.mean)).collect();
    outcome(
        gain_ok && dominance_ok && clean_ok,
        format!(
            "noise 0.4 mAP over 5 seeds [{}]; full - baseline {:+.2} (need >= +2: {}); full >= every row: {}; clean full - baseline {:+.2} (need |.| <= 1: {})",
            table.join(", "),
            full - base,
            if gain_ok { "ok" } else { "no" },
            if dominance_ok { "ok" } else { "no" },
            cf - cb,
            if clean_ok { "ok" } else { "no" }
        ),
    )
}

fn deterministic_log() -> Outcome {
    let cfg = TrainConfig {
        scenario: ScenarioConfig {
            noise_rate: 0.4,
            ..ScenarioConfig::default()
        },
        flags: ModuleFlags::FULL,
        ..TrainConfig::default()
    };
    let csv = || {
        let mut buf = Vec::new();
        train(&cfg).unwrap().record.write_steps_csv(&mut buf).unwrap();
        buf
    };
    let (a, b) = (csv(), csv());
    outcome(a == b, format!("two full runs, {} bytes of step log, identical: {}", a.len(), a == b))
}

fn annotation_round_trip() -> Outcome {
    let mut rng = stream(4, 15, 0);
    let texts: Vec<String> = (0..20).map(|i| common::voc_fixture(&mut rng, i, 5)).collect();
    let docs: Vec<VocDoc> = texts.iter().map(|t| parse_voc(t).unwrap()).collect();
    let round_trip = docs.iter().all(|d| parse_voc(&write_voc(d)).is_ok_and(|x| &x == d));
    let (out, log) = corrupt_annotations(&docs, &voc_universe(), 0.2, 8).unwrap();
    let mut diff_ok = true;
    let mut changed = 0;
    for (a, b) in docs.iter().zip(&out) {
        match common::name_and_removal_diff(&write_voc(a), &write_voc(b)) {
            Ok((r, m)) => changed += r + m,
            Err(_) => diff_ok = false,
        }
    }
    let ok = round_trip && log.changes.len() == 20 && diff_ok && changed == 20;
    outcome(
        ok,
        format!(
            "20 fixtures round-trip: {round_trip}; 100 objects at 0.2 -> {} log entries, diff limited to names/removals: {diff_ok}",
            log.changes.len()
        ),
    )
}

fn main() {
    let checks: [(&str, u64, fn() -> Outcome); 9] = [
        ("gradient checks", 30, gradient_checks),
        ("mining vs exhaustive filter", 60, mining_oracle),
        ("graph relation identities", 60, graph_identities),
        ("meta-update expansion order", 60, meta_expansion),
        ("label-noise protocol", 10, noise_protocol),
        ("AP oracle and error taxonomy", 60, ap_oracle_and_taxonomy),
        ("end-to-end ablation", 300, end_to_end),
        ("step-log determinism", 120, deterministic_log),
        ("annotation round trip", 60, annotation_round_trip),
    ];
    let mut failed = 0;
    for (name, budget, check) in checks {
        if !run(name, Duration::from_secs(budget), check) {
            failed += 1;
        }
    }
    println!("acceptance: {} of {} checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
