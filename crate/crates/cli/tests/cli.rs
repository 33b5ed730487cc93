use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mklab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mklab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_TRAIN: &str = r#"{
  "preset": "tiny",
  "variant": {"kind": "vanillak", "charts": 4, "cb": true},
  "train": {"total_epochs": 40, "batch_size": 32, "lr_max": 0.001, "lr_min": 0.00001},
  "dataset": {"kind": "synthetic", "classes": 4, "samples_per_class": 32}
}"#;

#[test]
fn count_expectations() {
    let dir = tempfile::tempdir().unwrap();
    let sk = write_config(
        dir.path(),
        "sk.json",
        r#"{"preset": "vit-s16", "variant": {"kind": "spatialk", "charts": 8}}"#,
    );
    let o = mklab(&[
        "count",
        "--config",
        s(&sk),
        "--expect",
        "params_M=52,flops_G=11.3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("blocks.11.attn.key.mix"));

    let b = write_config(dir.path(), "b.json", r#"{"preset": "vit-b16"}"#);
    let out = dir.path().join("cost");
    assert_eq!(
        code(&mklab(&[
            "count",
            "--config",
            s(&b),
            "--expect",
            "params_M=87",
            "--out",
            s(&out)
        ])),
        0
    );
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("cost.json")).unwrap()).unwrap();
    let total = report["totals"]["params"].as_u64().unwrap();
    let rows: u64 = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["params"].as_u64().unwrap())
        .sum();
    assert_eq!(total, rows);

    let o = mklab(&["count", "--config", s(&b), "--expect", "params_M=999"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("wanted 999"));
}

#[test]
fn malformed_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let typo = write_config(
        dir.path(),
        "typo.json",
        "{\n  \"preset\": \"tiny\",\n  \"trian\": {}\n}",
    );
    let o = mklab(&["count", "--config", s(&typo)]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("trian") && err.contains("line 3"), "{err}");

    let missing = write_config(
        dir.path(),
        "missing.json",
        r#"{"preset": "tiny", "dataset": {"kind": "idx", "images": "nope.idx", "labels": "nope.idx"}}"#,
    );
    assert_eq!(code(&mklab(&["train", "--config", s(&missing)])), 2);
    assert_eq!(
        code(&mklab(&["count", "--config", "/does/not/exist.json"])),
        2
    );
    assert_eq!(code(&mklab(&["count"])), 2);
    assert_eq!(
        code(&mklab(&[
            "count",
            "--config",
            s(&typo),
            "--expect",
            "params=1"
        ])),
        2
    );
}

#[test]
fn train_eval_and_attnmap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", TINY_TRAIN);
    let run = dir.path().join("run");
    let o = mklab(&[
        "train",
        "--config",
        s(&cfg),
        "--seed",
        "0",
        "--out",
        s(&run),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(run.join("summary.json")).unwrap()).unwrap();
    assert!(summary["best_top1"].as_f64().unwrap() >= 0.95, "{summary}");
    assert!(summary["wall_time_s"].as_f64().is_some());
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 41);

    let o = mklab(&["eval", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(code(&o), 0);
    let eval: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(eval["top1"], summary["best_top1"]);

    let maps = dir.path().join("maps");
    let ckpt = run.join("best.ckpt");
    let o = mklab(&[
        "attnmap",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--index",
        "5",
        "--out",
        s(&maps),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut files: Vec<_> = fs::read_dir(&maps)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    files.sort();
    assert_eq!(
        files,
        [
            "attn_raw_h0.pgm",
            "attn_raw_h1.pgm",
            "attn_rollout_h0.pgm",
            "attn_rollout_h1.pgm"
        ]
    );
    let first = fs::read(maps.join("attn_rollout_h1.pgm")).unwrap();
    assert!(first.starts_with(b"P5\n32 32\n255\n"));
    mklab(&[
        "attnmap",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--index",
        "5",
        "--out",
        s(&maps),
    ]);
    assert_eq!(first, fs::read(maps.join("attn_rollout_h1.pgm")).unwrap());

    let o = mklab(&[
        "attnmap",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--heads",
        "2",
        "--out",
        s(&maps),
    ]);
    assert_eq!(code(&o), 2);
    let o = mklab(&[
        "attnmap",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--layers",
        "0..3",
        "--out",
        s(&maps),
    ]);
    assert_eq!(code(&o), 2);

    let bad = dir.path().join("bad.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] = b'X';
    fs::write(&bad, bytes).unwrap();
    let o = mklab(&[
        "attnmap",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&bad),
        "--out",
        s(&maps),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn uniform_attention_gives_flat_rollout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.json",
        &TINY_TRAIN.replace("\"total_epochs\": 40", "\"total_epochs\": 1"),
    );
    let run = dir.path().join("run");
    assert_eq!(
        code(&mklab(&["train", "--config", s(&cfg), "--out", s(&run)])),
        0
    );
    let o = mklab(&[
        "attnmap",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&run.join("last.ckpt")),
        "--uniform-attention",
        "--heads",
        "1",
        "--out",
        s(&dir.path().join("maps")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["attn_raw_h1.pgm", "attn_rollout_h1.pgm"] {
        let b = fs::read(dir.path().join("maps").join(f)).unwrap();
        let header = b"P5\n32 32\n255\n";
        assert!(b[header.len()..].iter().all(|&p| p == 0), "{f} is not flat");
    }
    assert!(!dir.path().join("maps/attn_raw_h0.pgm").exists());
}

#[test]
fn train_output_errors() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let cfg = write_config(dir.path(), "run.json", TINY_TRAIN);
    let o = mklab(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&blocker.join("sub")),
    ]);
    assert_eq!(code(&o), 2);
    let o = mklab(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2, "no output_dir");
}

#[test]
fn divergence_exits_3_and_keeps_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.json",
        &TINY_TRAIN
            .replace("\"lr_max\": 0.001", "\"lr_max\": 1e30")
            .replace("\"total_epochs\": 40", "\"total_epochs\": 4")
            .replace("\"samples_per_class\": 32", "\"samples_per_class\": 8"),
    );
    let run = dir.path().join("run");
    let o = mklab(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("metrics.csv").exists());
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let all = write_config(dir.path(), "all.json", r#"{"preset": "gradcheck"}"#);
    let o = mklab(&[
        "gradcheck",
        "--config",
        s(&all),
        "--out",
        s(&dir.path().join("gc")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let rows: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("gc/gradcheck.json")).unwrap()).unwrap();
    for name in [
        "key.gamma",
        "key.mix",
        "key.condense",
        "key.gamma_prime",
        "key.to_out",
    ] {
        assert!(rows
            .as_array()
            .unwrap()
            .iter()
            .any(|r| r["parameter"].as_str().unwrap().ends_with(name)));
    }

    let o = mklab(&["gradcheck", "--config", s(&all), "--corrupt-gradient"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("patch_embed.weight"));

    let base = write_config(
        dir.path(),
        "base.json",
        r#"{"preset": "gradcheck", "gradcheck": {"variants": ["baseline"]}}"#,
    );
    let o = mklab(&["gradcheck", "--config", s(&base)]);
    assert_eq!(code(&o), 0);
    assert!(!String::from_utf8_lossy(&o.stdout).contains("vanillak"));
}
