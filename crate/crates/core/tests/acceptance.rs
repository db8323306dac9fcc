//! End-to-end acceptance checks. Runs every criterion sequentially (timings
//! are part of several of them), prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::time::{Duration, Instant};

use edge_transformer::attention::AblationMode;
use edge_transformer::model::Seq2SeqModel;
use edge_transformer::tasks::Split;
use edge_transformer::train::{bench_scaling, load_splits, run_training, AnyModel, RunConfig};
use edge_transformer::verify::{gradient_suite, invariant_suite, oracle_equivalence, prefix_consistency, CheckResult};

struct Verdict {
    criterion: usize,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

fn failed_names(results: &[CheckResult]) -> String {
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| format!("{} ({:.3e})", r.name, r.value)).collect();
    if failed.is_empty() {
        "none".into()
    } else {
        failed.join(", ")
    }
}

fn oracle(seed: u64) -> Verdict {
    let start = Instant::now();
    let r = oracle_equivalence(seed).expect("oracle suite runs");
    let t = start.elapsed();
    Verdict {
        criterion: 1,
        title: "attention matches the loop oracle",
        passed: r.passed && t < Duration::from_secs(60),
        detail: format!("max rel error {:.3e} (<= 1e-12), {:.1}s (< 60s); {}", r.value, t.as_secs_f64(), r.detail),
    }
}

fn gradients(seed: u64) -> Verdict {
    let start = Instant::now();
    let results = gradient_suite(seed).expect("gradient suite runs");
    let t = start.elapsed();
    let worst = results.iter().map(|r| r.value).fold(0.0, f64::max);
    Verdict {
        criterion: 2,
        title: "full-model gradient check",
        passed: results.iter().all(|r| r.passed) && worst < 1e-4 && t < Duration::from_secs(300),
        detail: format!("{} configurations, max rel error {worst:.3e} (< 1e-4), {:.1}s (< 300s); failed: {}", results.len(), t.as_secs_f64(), failed_names(&results)),
    }
}

fn invariants(seed: u64) -> Verdict {
    let start = Instant::now();
    let results = invariant_suite(seed).expect("invariant suite runs");
    let t = start.elapsed();
    Verdict {
        criterion: 3,
        title: "invariant suite",
        passed: results.iter().all(|r| r.passed) && t < Duration::from_secs(300),
        detail: format!("{} checks, {:.1}s (< 300s); failed: {}", results.len(), t.as_secs_f64(), failed_names(&results)),
    }
}

fn score(model: &AnyModel, splits: &[Split], name: &str, batch: usize) -> f64 {
    let split = splits.iter().find(|s| s.spec.name == name).unwrap_or_else(|| panic!("split {name}"));
    model.score(split, batch).expect("scoring")
}

fn length_generalization() -> Verdict {
    let seeds = [0u64, 1, 2];
    let mut base = Vec::new();
    let mut ablated = Vec::new();
    let mut slowest = Duration::ZERO;
    let mut lines = Vec::new();
    for &seed in &seeds {
        for mode in [AblationMode::Base, AblationMode::ValueAblation] {
            let mut cfg = RunConfig::relation();
            cfg.set("seed", &seed.to_string()).unwrap();
            cfg.model.mode = mode;
            let start = Instant::now();
            let splits = load_splits(&cfg).expect("relation data");
            let out = run_training(&cfg, &splits, None, |_| {}).expect("training");
            let accs: Vec<f64> =
                ["test_k4", "test_k5", "test_k6"].iter().map(|n| score(&out.best, &splits, n, cfg.eval_batch_size)).collect();
            let t = start.elapsed();
            slowest = slowest.max(t);
            lines.push(format!("seed {seed} {mode}: k4 {:.3} k5 {:.3} k6 {:.3} ({:.1} min)", accs[0], accs[1], accs[2], minutes(t)));
            println!("  criterion 4 run: {}", lines.last().unwrap());
            match mode {
                AblationMode::Base => base.push(accs),
                _ => ablated.push(accs),
            }
        }
    }
    let mean = |runs: &[Vec<f64>], k: usize| runs.iter().map(|a| a[k]).sum::<f64>() / runs.len() as f64;
    let (k4, k6, ablated_k6) = (mean(&base, 0), mean(&base, 2), mean(&ablated, 2));
    let gap = k6 - ablated_k6;
    Verdict {
        criterion: 4,
        title: "length generalization on cyclic-group(5) chains",
        passed: k4 >= 0.95 && k6 >= 0.60 && gap >= 0.10 && slowest <= Duration::from_secs(30 * 60),
        detail: format!(
            "3-seed means: base k4 {k4:.3} (>= 0.95), base k6 {k6:.3} (>= 0.60), value-ablated k6 {ablated_k6:.3}, gap {gap:.3} (>= 0.10); slowest run {:.1} min (<= 30)",
            minutes(slowest)
        ),
    }
}

fn reverse_task() -> Verdict {
    let cfg = RunConfig::reverse();
    let start = Instant::now();
    let splits = load_splits(&cfg).expect("reverse data");
    let out = run_training(&cfg, &splits, None, |_| {}).expect("training");
    let AnyModel::Seq2Seq(model) = &out.best else { unreachable!("reverse task trains an encoder-decoder") };
    let test = splits.iter().find(|s| s.spec.name.starts_with("test")).expect("test split");
    let exact = out.best.score(test, cfg.eval_batch_size).expect("scoring");
    let srcs: Vec<&[usize]> = test.sequences().unwrap().iter().map(|x| x.src.as_slice()).collect();
    let consistent = prefix_consistency::<f32>(model as &Seq2SeqModel<f32>, &srcs, decode_len(&cfg)).expect("decoding");
    let t = start.elapsed();
    Verdict {
        criterion: 5,
        title: "sequence reversal with the encoder-decoder",
        passed: exact >= 0.99 && consistent == srcs.len() && t <= Duration::from_secs(15 * 60),
        detail: format!(
            "{} exact match {exact:.4} (>= 0.99); prefix-consistent {consistent}/{}; {:.1} min (<= 15)",
            test.spec.name,
            srcs.len(),
            minutes(t)
        ),
    }
}

fn decode_len(cfg: &RunConfig) -> usize {
    cfg.decode_max_len.min(cfg.model.max_len - 1)
}

fn scaling(seed: u64) -> Verdict {
    let cfg = RunConfig::relation();
    let start = Instant::now();
    let report = bench_scaling(&cfg.model, &cfg.bench_sizes, cfg.bench_repeats, seed).expect("bench");
    let t = start.elapsed();
    let rows: Vec<String> = report.rows.iter().map(|r| format!("n={} {:.4}s", r.n, r.median_seconds)).collect();
    Verdict {
        criterion: 6,
        title: "forward time scales cubically in n",
        passed: (2.5..=3.5).contains(&report.slope) && t < Duration::from_secs(300),
        detail: format!("log-log slope {:.3} (in [2.5, 3.5]) over {}; {:.1}s (< 300s)", report.slope, rows.join(", "), t.as_secs_f64()),
    }
}

#[test]
fn acceptance() {
    let seed = 0;
    let verdicts = vec![
        oracle(seed),
        gradients(seed),
        invariants(seed),
        length_generalization(),
        reverse_task(),
        scaling(seed),
    ];
    for v in &verdicts {
        println!("criterion {}: {} - {}: {}", v.criterion, if v.passed { "PASS" } else { "FAIL" }, v.title, v.detail);
    }
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.passed).map(|v| v.criterion).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
