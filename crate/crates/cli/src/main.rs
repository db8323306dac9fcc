//! `edgeformer`: data generation, training, evaluation, decoding, gradient
//! checks, benchmarks and self-tests for the Edge Transformer.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use edge_transformer::tasks::Split;
use edge_transformer::train::{bench_scaling, load_splits, run_training, AnyModel, RunConfig, RUN_KEYS};
use edge_transformer::verify::{gradient_suite, invariant_suite, oracle_equivalence, CheckResult};
use edge_transformer::Error;

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "edgeformer", version, about = "Edge Transformer experiments on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` config file; see `--set` for the keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed for data, initialization and shuffling (same as `--set seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for the manifest and every machine-readable output.
    #[arg(long, global = true, value_name = "DIR", default_value = "edgeformer-out")]
    out: PathBuf,

    /// Override one config key; repeatable and applied after `--config`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the configured dataset splits as files.
    GenData,
    /// Train a model and write metrics.csv, best.ckpt and last.ckpt.
    Train,
    /// Score a checkpoint on the configured splits.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Greedy-decode a file of whitespace-separated source token lines.
    Decode {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
    /// Finite-difference check of full-model gradients in f64.
    Gradcheck,
    /// Time forward passes against n and fit the log-log slope.
    Bench,
    /// Oracle-equivalence and invariant suites.
    Selftest,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Decode { .. } => "decode",
            Command::Gradcheck => "gradcheck",
            Command::Bench => "bench",
            Command::Selftest => "selftest",
        }
    }
}

/// A failed check or suite; exit code 3.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct CheckFailed(String);

/// A malformed command line; exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut assignments = Vec::new();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        assignments.extend(RunConfig::parse_assignments(&text, path)?);
    }
    for s in &cli.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Usage(format!("--set expects KEY=VALUE, got {s:?}; valid keys: {}", RUN_KEYS.join(", "))))?;
        assignments.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = cli.seed {
        assignments.push(("seed".into(), seed.to_string()));
    }
    Ok(RunConfig::from_assignments(&assignments)?)
}

/// Writes `manifest.txt`: the resolved config (loadable with `--config`)
/// preceded by comments naming the tool, command and artifacts.
fn write_manifest(out: &Path, command: &Command, cfg: &RunConfig, artifacts: &[String]) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut text = format!("# edgeformer {VERSION}\n# command: {}\n", command.name());
    match command {
        Command::Eval { checkpoint } => writeln!(text, "# checkpoint: {}", checkpoint.display())?,
        Command::Decode { checkpoint, input } => {
            writeln!(text, "# checkpoint: {}\n# input: {}", checkpoint.display(), input.display())?
        }
        _ => {}
    }
    writeln!(text, "# artifacts: {}", artifacts.join(" "))?;
    text.push_str(&cfg.to_string());
    std::fs::write(out.join("manifest.txt"), text)?;
    Ok(())
}

fn print_checks(results: &[CheckResult]) -> bool {
    for r in results {
        println!("{} {} {:.3e} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.value, r.detail);
    }
    results.iter().all(|r| r.passed)
}

fn checks_csv(results: &[CheckResult]) -> String {
    let mut s = String::from("name,passed,value\n");
    for r in results {
        s.push_str(&format!("{},{},{:e}\n", r.name, r.passed, r.value));
    }
    s
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::GenData => {
            let names: Vec<String> = cfg.data.splits().iter().map(|s| format!("{}.tsv", s.name)).collect();
            write_manifest(out, &cli.command, &cfg, &names)?;
            for split in edge_transformer::tasks::generate(&cfg.data)? {
                let path = out.join(format!("{}.tsv", split.spec.name));
                split.write(&path)?;
                println!("wrote {} ({} instances)", path.display(), split.instances.len());
            }
        }
        Command::Train => {
            let artifacts = ["metrics.csv", "best.ckpt", "last.ckpt", "scores.csv"].map(String::from);
            write_manifest(out, &cli.command, &cfg, &artifacts)?;
            let splits = load_splits(&cfg)?;
            let outcome = run_training(&cfg, &splits, Some(out), |e| {
                let scores: Vec<String> = e.scores.iter().map(|(n, v)| format!("{n} {v:.4}")).collect();
                println!("epoch {} loss {:.5} {} ({:.1}s)", e.epoch, e.train_loss, scores.join(" "), e.seconds);
            })?;
            outcome.last.save(&out.join("last.ckpt"))?;
            println!("best epoch {} ({} {:.4})", outcome.metrics.best_epoch, splits[1].spec.name, outcome.metrics.best_valid);
            write_scores(out, &outcome.best, &splits, cfg.eval_batch_size)?;
        }
        Command::Eval { checkpoint } => {
            write_manifest(out, &cli.command, &cfg, &["scores.csv".into()])?;
            let model = AnyModel::load(checkpoint)?;
            write_scores(out, &model, &load_splits(&cfg)?, cfg.eval_batch_size)?;
        }
        Command::Decode { checkpoint, input } => {
            write_manifest(out, &cli.command, &cfg, &["decoded.txt".into()])?;
            let AnyModel::Seq2Seq(model) = AnyModel::load(checkpoint)? else {
                bail!(Usage("decode needs an encoder-decoder checkpoint".into()));
            };
            let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
            let mut srcs = Vec::new();
            for (no, line) in text.lines().enumerate() {
                let tokens = line
                    .split_whitespace()
                    .map(|t| t.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Format { path: input.clone(), line: no + 1, reason: e.to_string() })?;
                srcs.push(tokens);
            }
            let refs: Vec<&[usize]> = srcs.iter().map(Vec::as_slice).collect();
            let mut lines = String::new();
            for chunk in refs.chunks(cfg.eval_batch_size) {
                for d in model.greedy_decode(chunk, cfg.decode_max_len)? {
                    let toks: Vec<String> = d.tokens.iter().map(|t| t.to_string()).collect();
                    let line = toks.join(" ") + if d.truncated { "\t(truncated)" } else { "" };
                    println!("{line}");
                    lines.push_str(&line);
                    lines.push('\n');
                }
            }
            std::fs::write(out.join("decoded.txt"), lines)?;
        }
        Command::Gradcheck => {
            write_manifest(out, &cli.command, &cfg, &["gradcheck.csv".into()])?;
            let results = gradient_suite(cfg.seed)?;
            let ok = print_checks(&results);
            let worst = results.iter().map(|r| r.value).fold(0.0, f64::max);
            println!("max relative error {worst:.3e} (threshold 1e-4)");
            std::fs::write(out.join("gradcheck.csv"), checks_csv(&results))?;
            if !ok {
                bail!(CheckFailed(format!("gradient check failed: max relative error {worst:e}")));
            }
        }
        Command::Bench => {
            write_manifest(out, &cli.command, &cfg, &["bench.csv".into()])?;
            let report = bench_scaling(&cfg.model, &cfg.bench_sizes, cfg.bench_repeats, cfg.seed)?;
            let mut csv = String::from("n,median_seconds\n");
            println!("{:>6} {:>14}", "n", "median (s)");
            for r in &report.rows {
                println!("{:>6} {:>14.6}", r.n, r.median_seconds);
                csv.push_str(&format!("{},{}\n", r.n, r.median_seconds));
            }
            println!("log-log slope {:.3}", report.slope);
            csv.push_str(&format!("# slope {}\n", report.slope));
            std::fs::write(out.join("bench.csv"), csv)?;
        }
        Command::Selftest => {
            write_manifest(out, &cli.command, &cfg, &["selftest.csv".into()])?;
            let mut results = vec![oracle_equivalence(cfg.seed)?];
            results.extend(invariant_suite(cfg.seed)?);
            let ok = print_checks(&results);
            std::fs::write(out.join("selftest.csv"), checks_csv(&results))?;
            if !ok {
                let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
                bail!(CheckFailed(format!("self-test failed: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn write_scores(out: &Path, model: &AnyModel, splits: &[Split], batch: usize) -> Result<()> {
    let metric = match model {
        AnyModel::Encoder(_) => "accuracy",
        AnyModel::Seq2Seq(_) => "exact_match",
    };
    let mut csv = String::from("split,metric,value\n");
    for s in splits {
        let v = model.score(s, batch)?;
        println!("{} {metric} {v:.4}", s.spec.name);
        csv.push_str(&format!("{},{metric},{v}\n", s.spec.name));
    }
    std::fs::write(out.join("scores.csv"), csv)?;
    Ok(())
}

/// Exit code and error kind for a failure.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    if err.is::<Usage>() {
        return (2, "usage");
    }
    if err.is::<CheckFailed>() {
        return (3, "check");
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => (2, "config"),
        Some(Error::NonFinite { .. }) => (4, "numeric"),
        Some(Error::Io(_)) => (3, "io"),
        Some(_) => (3, "validation"),
        None if err.chain().any(|c| c.is::<std::io::Error>()) => (3, "io"),
        None => (3, "validation"),
    }
}

/// One line on stderr: `error kind=<kind> exit=<code> message=<text>`.
fn report(code: u8, kind: &str, message: &str) -> ExitCode {
    let flat = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error kind={kind} exit={code} message={flat}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            return report(2, "usage", &first);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, kind) = classify(&err);
            report(code, kind, &format!("{err:#}"))
        }
    }
}
