//! Acceptance checks, one line per criterion.
//!
//! `cargo test -p retro-core --test acceptance` runs everything; trailing
//! numbers (`-- 5 7`) select a subset. The process exits non-zero if a hard
//! check fails. Directional comparisons between finite-seed runs (return and
//! wall-clock in criterion 8) are reported but only affect the exit status
//! when `ACCEPTANCE_STRICT=1`.

mod common;

use std::path::Path;
use std::time::Instant;

use retro_core::harness::{run_ablation_frequency, run_meta_test, run_training, RunArtifacts, TaskData, TrainingConfig, METRIC_CSVS};
use retro_core::par::Execution;
use retro_core::rng;
use retro_core::theory::{self, CorollaryConfig, VIOLATION_TOL};

const EXEC: Execution = Execution::Parallel;
const SWEEP_CONFIGS: usize = 1000;
const SWEEP_SECONDS: f64 = 120.0;
const WEISSMAN_TRIALS: usize = 10_000;
const COROLLARY_TRIALS: usize = 1000;
const INVARIANCE_CONTEXTS: u64 = 100;
const PIPELINE_SEEDS: [u64; 4] = [0, 1, 2, 3];
const ACCURACY_FLOOR: f64 = 0.9;
/// Held-out accuracy "at convergence" is the mean over this many final eval points.
const CONVERGENCE_WINDOW: usize = 5;
const SEED_BUDGET_SECONDS: f64 = 1800.0;
const META_TEST_SEED: u64 = 0xacce;
const SHORT_STEPS: usize = 4000;

struct Outcome {
    passed: bool,
    /// `passed` ignoring directional comparisons.
    hard_passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome {
        passed,
        hard_passed: passed,
        detail,
    }
}

fn sweep(report: theory::BoundReport) -> Outcome {
    let passed = report.n_configs == SWEEP_CONFIGS
        && report.n_violations == 0
        && report.min_margin >= -VIOLATION_TOL
        && report.runtime_secs < SWEEP_SECONDS;
    let mut detail = format!(
        "{}: {} configs, {} violations, min margin {:.3e}, {:.1}s",
        report.name, report.n_configs, report.n_violations, report.min_margin, report.runtime_secs
    );
    if let Some(t) = report.monotonicity {
        detail += &format!(", improved {}/{} where the condition holds", t.improved_when_condition_holds, t.condition_holds);
    }
    outcome(passed, detail)
}

fn c1() -> Outcome {
    sweep(theory::verify_return_bound(SWEEP_CONFIGS, 1, EXEC).unwrap())
}

fn c2() -> Outcome {
    let r = theory::verify_perf_diff_bound(SWEEP_CONFIGS, 2, EXEC).unwrap();
    let t = r.monotonicity.expect("perf-diff sweep tallies monotonicity");
    let monotone = t.improved_when_condition_holds == t.condition_holds;
    let mut o = sweep(r);
    o.passed &= monotone;
    o.hard_passed = o.passed;
    o
}

fn c3() -> Outcome {
    sweep(theory::lemma_a1_check(SWEEP_CONFIGS, 3, EXEC).unwrap())
}

fn c4() -> Outcome {
    let cells = theory::weissman_grid(WEISSMAN_TRIALS, 4, EXEC).unwrap();
    let failed: Vec<String> = cells
        .iter()
        .filter(|c| !(c.empirical_rate <= c.analytic_bound + 3.0 * c.sigma))
        .map(|c| format!("(|A|={}, m={}, eps={})", c.alphabet_size, c.m, c.eps))
        .collect();
    let worst = cells.iter().map(|c| c.empirical_rate - c.analytic_bound.min(1.0)).fold(f64::NEG_INFINITY, f64::max);
    outcome(
        cells.len() == 27 && failed.is_empty(),
        format!("{} cells x {WEISSMAN_TRIALS} trials, max rate - bound {worst:.4}, failing {failed:?}", cells.len()),
    )
}

fn c5() -> Outcome {
    let cfg = CorollaryConfig {
        r_max: 1.0,
        gamma: 0.0,
        lipschitz: 1.0,
        eps_mutual: 1.0,
        beta: 0.1,
        vol_z: 2,
        xi: 0.5,
        n_prior: 0,
    };
    // independent evaluation: kappa = 2, gap = 1 - 2 * 0.1, ln((2^2 - 2) / 0.5)
    let direct = 8.0 * 4.0 / (0.8f64 * 0.8) * 4f64.ln();
    let k = theory::corollary_k(&cfg).unwrap();
    let uniform = theory::verify_corollary(&cfg, &[0.5, 0.5], COROLLARY_TRIALS, 5, EXEC).unwrap();
    let skewed = theory::verify_corollary(&cfg, &[0.8, 0.2], COROLLARY_TRIALS, 5, EXEC).unwrap();
    let passed = (k.k - 69.31).abs() <= 0.01
        && (k.k - direct).abs() < 1e-9
        && k.extra_samples == 70
        && uniform.n_samples == 70
        && [uniform, skewed].iter().all(|r| r.passed && r.success_rate >= 0.5);
    outcome(
        passed,
        format!(
            "k = {:.4} (ceil {}), success {:.3} uniform / {:.3} skewed over {COROLLARY_TRIALS} trials",
            k.k, k.extra_samples, uniform.success_rate, skewed.success_rate
        ),
    )
}

fn c6() -> Outcome {
    let errors: Vec<(&str, f64)> = common::LOSSES.iter().map(|&l| (l, common::worst_gradient_error(l))).collect();
    let passed = errors.iter().all(|(_, e)| *e <= common::FD_TOL);
    let parts: Vec<String> = errors.iter().map(|(l, e)| format!("{l} {e:.1e}")).collect();
    outcome(passed, format!("{} instances each, max relative error: {}", common::N_INSTANCES, parts.join(", ")))
}

fn c7() -> Outcome {
    let held = (0..INVARIANCE_CONTEXTS).filter(|&s| common::invariance_holds(rng::derive(0x1a7, s))).count();
    outcome(held as u64 == INVARIANCE_CONTEXTS, format!("{held}/{INVARIANCE_CONTEXTS} contexts bit-identical under shuffle and duplication"))
}

fn heldout_series(a: &RunArtifacts) -> Vec<f64> {
    let mut r = csv::Reader::from_path(&a.accuracy_csv).unwrap();
    r.records().map(|x| x.unwrap()).filter(|x| &x[1] == "heldout").map(|x| x[2].parse().unwrap()).collect()
}

fn converged_accuracy(a: &RunArtifacts) -> f64 {
    let s = heldout_series(a);
    let tail = &s[s.len().saturating_sub(CONVERGENCE_WINDOW)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn c8(root: &Path) -> Outcome {
    let base = TrainingConfig::desk();
    let data = TaskData::for_config(&base, EXEC).unwrap();
    let mut acc = [vec![], vec![]];
    let mut ret = [vec![], vec![]];
    let mut secs = [0.0, 0.0];
    let mut halved = true;
    let mut slowest_seed: f64 = 0.0;
    for seed in PIPELINE_SEEDS {
        let mut seed_secs = 0.0;
        for (i, f) in [1, 2].into_iter().enumerate() {
            let mut c = base.clone();
            c.seed = seed;
            c.update_frequency = f;
            c.out_dir = root.join(format!("pipeline_f{f}_s{seed}"));
            let started = Instant::now();
            let a = run_training(&c, &data, EXEC).unwrap();
            let meta = run_meta_test(&a, &data, c.eval_episodes, META_TEST_SEED, EXEC).unwrap();
            seed_secs += started.elapsed().as_secs_f64();
            acc[i].push(converged_accuracy(&a));
            ret[i].push(meta.mean_return);
            secs[i] += a.train_seconds;
            if f == 2 {
                halved &= a.encoder_updates * 2 == c.total_steps;
            }
            println!(
                "    seed {seed} f{f}: accuracy {:.3}, meta-test return {:.3}, {} updates, {:.1}s",
                acc[i].last().unwrap(),
                meta.mean_return,
                a.encoder_updates,
                a.train_seconds
            );
        }
        slowest_seed = slowest_seed.max(seed_secs);
    }
    let a_ok = acc.iter().flatten().all(|&x| x >= ACCURACY_FLOOR);
    let b_ok = mean(&ret[1]) >= mean(&ret[0]);
    let wins = ret[1].iter().zip(&ret[0]).filter(|(r, c)| r >= c).count();
    let d_ok = secs[1] <= secs[0];
    let budget_ok = slowest_seed < SEED_BUDGET_SECONDS;
    let hard_passed = a_ok && halved && budget_ok;
    let mut o = outcome(
        hard_passed && b_ok && d_ok,
        format!(
            "(a) min accuracy {:.3} [{}] (b) return f2 {:.3} vs f1 {:.3}, f2 ahead on {}/{} seeds [{}] (c) halved [{}] (d) {:.1}s vs {:.1}s [{}], slowest seed {:.0}s",
            acc.iter().flatten().copied().fold(f64::INFINITY, f64::min),
            ok(a_ok),
            mean(&ret[1]),
            mean(&ret[0]),
            wins,
            PIPELINE_SEEDS.len(),
            ok(b_ok),
            ok(halved),
            secs[1],
            secs[0],
            ok(d_ok),
            slowest_seed
        ),
    );
    o.hard_passed = hard_passed;
    o
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "fail"
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

fn c9(root: &Path) -> Outcome {
    let mut c = TrainingConfig::desk();
    c.total_steps = SHORT_STEPS / 2;
    c.seed = 9;
    let data = TaskData::for_config(&c, EXEC).unwrap();
    let runs: Vec<RunArtifacts> = [Execution::Parallel, Execution::Sequential, Execution::Parallel]
        .into_iter()
        .enumerate()
        .map(|(i, exec)| {
            let mut ci = c.clone();
            ci.out_dir = root.join(format!("repeat_{i}"));
            run_training(&ci, &data, exec).unwrap()
        })
        .collect();
    let first = &runs[0];
    let mut differing = vec![];
    for other in &runs[1..] {
        for name in METRIC_CSVS {
            if read(&first.out_dir.join(name)) != read(&other.out_dir.join(name)) {
                differing.push(name.to_string());
            }
        }
        let same_ckpts = first.checkpoints.len() == other.checkpoints.len()
            && first.checkpoints.iter().zip(&other.checkpoints).all(|(a, b)| read(a) == read(b));
        if !same_ckpts {
            differing.push("checkpoints".into());
        }
    }
    outcome(
        differing.is_empty(),
        format!("3 repeats (parallel, sequential, parallel) of {} steps, differing artifacts {differing:?}", c.total_steps),
    )
}

fn csv_finite(p: &Path) -> bool {
    let mut r = csv::Reader::from_path(p).unwrap();
    r.records().all(|rec| rec.unwrap().iter().all(|cell| cell.parse::<f64>().map_or(true, f64::is_finite)))
}

fn c10(root: &Path) -> Outcome {
    let mut c = TrainingConfig::desk();
    c.total_steps = SHORT_STEPS;
    c.out_dir = root.join("ablation");
    let data = TaskData::for_config(&c, EXEC).unwrap();
    let freqs = [1, 2, 4, 8];
    let report = run_ablation_frequency(&c, &data, &freqs, &[0], EXEC).unwrap();
    let complete = report.summary.iter().map(|s| s.frequency).eq(freqs) && report.rows.len() == freqs.len();
    let csvs_finite = freqs.iter().all(|f| {
        let dir = c.out_dir.join(format!("f{f}_s0"));
        METRIC_CSVS.iter().all(|n| csv_finite(&dir.join(n)))
    });
    let table = c.out_dir.join("ablation.csv");
    let rows: Vec<String> = report
        .summary
        .iter()
        .map(|s| format!("f{} return {:.2} acc {:.2} shift {:.3}", s.frequency, s.mean_final_return, s.mean_heldout_accuracy, s.mean_shift))
        .collect();
    outcome(
        complete && table.exists() && report.all_finite() && csvs_finite,
        format!("{} steps each: {}", c.total_steps, rows.join("; ")),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let criteria: [(usize, &dyn Fn() -> Outcome); 10] = [
        (1, &c1),
        (2, &c2),
        (3, &c3),
        (4, &c4),
        (5, &c5),
        (6, &c6),
        (7, &c7),
        (8, &|| c8(root)),
        (9, &|| c9(root)),
        (10, &|| c10(root)),
    ];
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let (mut failures, mut hard_failures) = (0, 0);
    for (n, run) in criteria {
        if !want(n) {
            continue;
        }
        let started = Instant::now();
        let o = run();
        failures += usize::from(!o.passed);
        hard_failures += usize::from(!o.hard_passed);
        println!(
            "criterion {n:>2}: {} ({:.0}s) {}",
            if o.passed { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed, {hard_failures} of them on hard checks");
    }
    if hard_failures > 0 || (strict && failures > 0) {
        std::process::exit(1);
    }
}
