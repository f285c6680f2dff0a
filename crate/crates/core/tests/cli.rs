use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "seed": 3,
  "model.vocab_size": 16,
  "model.num_classes": 4,
  "model.hidden": 16,
  "model.heads": 2,
  "model.pass1_layers": 1,
  "model.pass2_layers": 1,
  "model.grid_height": 4,
  "model.grid_width": 4,
  "train.dataset_size": 40,
  "train.batch_size": 8,
  "train.epochs": 2,
  "train.chunk_size": 4,
  "train.snapshot_every": 5,
  "bench.steps": [4, 2],
  "bench.batch": 2,
  "bench.repeats": 1
}"#;

fn arpg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arpg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = arpg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
    ckpt: PathBuf,
}

fn trained() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    fs::write(&config, TINY).unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&config), "--out", s(&run)]);
    let ckpt = run.join("model.ckpt");
    Fixture { dir, config, ckpt }
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = arpg(&["generate", "--config", "/nonexistent/cfg.json", "--checkpoint", "x.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cfg.json"));
    assert_eq!(arpg(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(arpg(&["train", "--train.nonsense=1"]).status.code(), Some(2));
}

#[test]
fn train_writes_one_metrics_line_per_step() {
    let f = trained();
    let run = f.dir.path().join("run");
    let lines = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 10);
    assert!(run.join("snapshot_000005.ckpt").exists());
    assert!(!run.join("snapshot_000010.ckpt").exists());
    assert_eq!(json(&run.join("config.json"))["model.hidden"], 16);
}

#[test]
fn resumed_training_reproduces_the_loss_trace() {
    let f = trained();
    let run = f.dir.path().join("run");
    let resumed = f.dir.path().join("resumed");
    ok(&[
        "train",
        "--config",
        s(&f.config),
        "--out",
        s(&resumed),
        "--resume",
        s(&run.join("snapshot_000005.ckpt")),
    ]);
    let losses = |p: PathBuf| -> Vec<(u64, f64)> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| {
                let v: Value = serde_json::from_str(l).unwrap();
                (v["step"].as_u64().unwrap(), v["loss"].as_f64().unwrap())
            })
            .collect()
    };
    let full = losses(run.join("metrics.jsonl"));
    let tail = losses(resumed.join("metrics.jsonl"));
    assert_eq!(tail.len(), 5);
    assert_eq!(&full[5..], &tail[..]);
    assert_eq!(fs::read(run.join("model.ckpt")).unwrap(), fs::read(resumed.join("model.ckpt")).unwrap());
}

#[test]
fn generation_is_deterministic_and_records_its_order() {
    let f = trained();
    let (a, b) = (f.dir.path().join("a"), f.dir.path().join("b"));
    for out in [&a, &b] {
        ok(&[
            "generate",
            "--config",
            s(&f.config),
            "--checkpoint",
            s(&f.ckpt),
            "--out",
            s(out),
            "--class",
            "2",
            "--count",
            "3",
            "--decode.steps=4",
            "--decode.seed=11",
        ]);
    }
    for i in 0..3 {
        let name = format!("sample_{i:03}.txt");
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
        assert!(fs::read(a.join(format!("sample_{i:03}.ppm"))).unwrap().starts_with(b"P6"));
    }
    let side = json(&a.join("sample.json"));
    assert_eq!(side["classes"], serde_json::json!([2, 2, 2]));
    assert_eq!(side["step_counts"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum::<u64>(), 16);
    let mut order: Vec<u64> = side["order"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    order.sort_unstable();
    assert_eq!(order, (1..=16).collect::<Vec<_>>());

    let mismatch = arpg(&["generate", "--checkpoint", s(&f.ckpt), "--out", s(&a), "--model.hidden=32"]);
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("model.hidden"));
}

#[test]
fn inpaint_keeps_the_known_half() {
    let f = trained();
    let input = f.dir.path().join("in.txt");
    let mask = f.dir.path().join("mask.txt");
    fs::write(&input, "1 2 3 4\n5 6 7 8\n9 9 9 9\n9 9 9 9\n").unwrap();
    fs::write(&mask, "1 1 1 1\n1 1 1 1\n0 0 0 0\n0 0 0 0\n").unwrap();
    let out = f.dir.path().join("inp");
    ok(&[
        "inpaint",
        "--config",
        s(&f.config),
        "--checkpoint",
        s(&f.ckpt),
        "--input",
        s(&input),
        "--mask",
        s(&mask),
        "--out",
        s(&out),
    ]);
    let text = fs::read_to_string(out.join("inpaint.txt")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].split_whitespace().collect::<Vec<_>>(), ["1", "2", "3", "4"]);
    assert_eq!(rows[1].split_whitespace().collect::<Vec<_>>(), ["5", "6", "7", "8"]);

    fs::write(&mask, "1 1\n0 0\n").unwrap();
    let bad = arpg(&["inpaint", "--checkpoint", s(&f.ckpt), "--input", s(&input), "--mask", s(&mask), "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(2));
}

fn read_csv(p: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect()
}

#[test]
fn attention_export_rows_are_distributions() {
    let f = trained();
    let out = f.dir.path().join("attn");
    ok(&["attn-export", "--config", s(&f.config), "--checkpoint", s(&f.ckpt), "--out", s(&out), "--class", "1"]);
    for h in 0..2 {
        for pass in ["pass1", "pass2"] {
            let m = read_csv(&out.join(format!("{pass}_head{h}.csv")));
            assert_eq!(m.len(), 16);
            for (i, row) in m.iter().enumerate() {
                assert_eq!(row.len(), 16);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5, "{pass} row {i}");
                if pass == "pass1" {
                    assert!(row[i + 1..].iter().all(|&p| p == 0.0), "pass1 row {i} looks ahead");
                }
            }
        }
    }
}

#[test]
fn bench_covers_both_patterns_with_exact_cache_sizes() {
    let f = trained();
    let out = f.dir.path().join("bench");
    ok(&["bench", "--config", s(&f.config), "--checkpoint", s(&f.ckpt), "--out", s(&out)]);
    let report = json(&out.join("bench.json"));
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    for pattern in ["causal", "block_causal"] {
        assert!(rows.iter().any(|r| r["pattern"] == pattern && r["steps"] == 16));
    }
    for r in rows {
        assert_eq!(r["cache_scalars"], r["cache_closed_form"]);
    }
    assert!(fs::read_to_string(out.join("bench.txt")).unwrap().contains("monotonicity"));
}

#[test]
fn grad_demo_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["grad-demo", "--out", s(dir.path())]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    assert!(dir.path().join("grad_demo.json").exists());
}
