use std::path::Path;
use std::process::{Command, Output};

fn edgeformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgeformer")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_data(out: &Path) -> Vec<String> {
    let mut args = vec!["--out".to_string(), out.display().to_string()];
    for kv in ["data.train_count=64", "data.valid_count=16", "data.test_count=16", "data.test_ranges=4"] {
        args.push("--set".into());
        args.push(kv.into());
    }
    args
}

#[test]
fn gen_data_is_reproducible() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let mut args = vec!["gen-data".to_string(), "--seed".into(), "5".into()];
        args.extend(small_data(d.path()));
        let o = edgeformer(&args.iter().map(String::as_str).collect::<Vec<_>>());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ["train.tsv", "valid.tsv", "test_k4.tsv", "manifest.txt"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        if name == "manifest.txt" {
            continue;
        }
        assert_eq!(a, b, "{name}");
    }
    let manifest = std::fs::read_to_string(dirs[0].path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed = 5"));
    assert!(manifest.contains("model.d = 64"));
}

#[test]
fn train_with_zero_learning_rate_has_constant_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut args: Vec<String> = ["train", "--set", "optimizer.lr=0", "--set", "train.epochs=2", "--set", "model.d=8", "--set", "model.heads=2"]
        .map(String::from)
        .to_vec();
    args.extend(small_data(dir.path()));
    let o = edgeformer(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    for (a, b) in rows.iter().filter(|r| r[0] == "1").zip(rows.iter().filter(|r| r[0] == "2")) {
        assert_eq!(a[1..3], b[1..3]);
        let (x, y): (f64, f64) = (a[3].parse().unwrap(), b[3].parse().unwrap());
        assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{a:?} vs {b:?}");
    }
    for f in ["best.ckpt", "last.ckpt", "scores.csv", "manifest.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    // the manifest reproduces the run and the checkpoint evaluates
    let again = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.txt");
    let o = edgeformer(&["train", "--config", manifest.to_str().unwrap(), "--out", again.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(dir.path().join("best.ckpt")).unwrap(), std::fs::read(again.path().join("best.ckpt")).unwrap());
    let strip = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p).unwrap().lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
    };
    assert_eq!(strip(&dir.path().join("metrics.csv")), strip(&again.path().join("metrics.csv")));

    let ckpt = dir.path().join("best.ckpt");
    let o = edgeformer(&["eval", "--config", manifest.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--out", again.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(dir.path().join("scores.csv")).unwrap(), std::fs::read(again.path().join("scores.csv")).unwrap());
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = edgeformer(&["gradcheck", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("max relative error"));
    assert!(dir.path().join("gradcheck.csv").exists());
}

#[test]
fn decode_reads_sources_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = edgeformer(&[
        "train", "--out", out, "--set", "data.task=reverse", "--set", "train.epochs=1", "--set", "data.train_count=32",
        "--set", "data.valid_count=8", "--set", "data.test_count=8", "--set", "model.d=8", "--set", "model.heads=2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let input = dir.path().join("src.txt");
    std::fs::write(&input, "1 2 3\n4 5\n").unwrap();
    let ckpt = dir.path().join("best.ckpt");
    let o = edgeformer(&["decode", "--checkpoint", ckpt.to_str().unwrap(), "--input", input.to_str().unwrap(), "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(dir.path().join("decoded.txt")).unwrap().lines().count(), 2);

    std::fs::write(&input, "1 x\n").unwrap();
    let o = edgeformer(&["decode", "--checkpoint", ckpt.to_str().unwrap(), "--input", input.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("src.txt:1"));
}

#[test]
fn errors_are_one_line_with_documented_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cases: [(&[&str], i32, &str); 5] = [
        (&["train", "--set", "model.depth=3", "--out", out], 2, "kind=config"),
        (&["train", "--set", "model.d", "--out", out], 2, "kind=usage"),
        (&["frobnicate"], 2, "kind=usage"),
        (&["train", "--bogus"], 2, "kind=usage"),
        (&["eval", "--checkpoint", "/nonexistent/x.ckpt", "--out", out], 3, "kind=io"),
    ];
    for (args, code, kind) in cases {
        let o = edgeformer(args);
        assert_eq!(o.status.code(), Some(code), "{args:?}: {}", stderr(&o));
        let err = stderr(&o);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error ") && err.contains(kind), "{err}");
    }
    let o = edgeformer(&["train", "--set", "model.depth=3", "--out", out]);
    assert!(stderr(&o).contains("model.layers"), "unknown keys list the valid ones");

    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "model.d = 8\nnonsense line\n").unwrap();
    let o = edgeformer(&["train", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("bad.conf:2"));
}

#[test]
fn bench_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = edgeformer(&[
        "bench", "--out", dir.path().to_str().unwrap(), "--set", "bench.sizes=4,8", "--set", "bench.repeats=1",
        "--set", "model.d=8", "--set", "model.heads=2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert!(csv.starts_with("n,median_seconds\n4,"));
}
