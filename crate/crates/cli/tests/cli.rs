use std::path::Path;
use std::process::{Command, Output};

fn tbdfs(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tbdfs"))
        .args(args)
        .current_dir(cwd)
        .env("TBDFS_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = tbdfs(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = tbdfs(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "stats",
        "prepare",
        "train",
        "eval",
        "ablate",
        "sweep",
        "paths",
        "gen-synth",
    ] {
        assert!(text.contains(sub), "usage lacks {sub}");
    }
}

#[test]
fn unknown_subcommand_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tbdfs(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(tbdfs(&["train", "--no-such-flag"], dir.path()).status.code(), Some(2));
}

#[test]
fn missing_file_exits_one_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = tbdfs(&["stats", "--data", "absent/events.csv"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent/events.csv"));
}

const SYNTH: &[&str] = &[
    "gen-synth",
    "--out",
    "ds",
    "--users",
    "10",
    "--items",
    "20",
    "--events",
    "270",
    "--noise-edges",
    "30",
    "--dim",
    "4",
    "--seed",
    "3",
];
const TRAIN: &[&str] = &[
    "train",
    "--data",
    "ds",
    "--out",
    "run",
    "--epochs",
    "2",
    "--heads",
    "1",
    "--fanout",
    "3",
    "--batch-size",
    "32",
    "--lr",
    "0.01",
    "--seed",
    "4",
];
const EVAL: &[&str] = &[
    "eval",
    "--data",
    "ds",
    "--checkpoint",
    "run/checkpoint.tbdf",
    "--out",
    "ev",
];

fn read(dir: &Path, file: &str) -> Vec<u8> {
    std::fs::read(dir.join(file)).unwrap_or_else(|e| panic!("{file}: {e}"))
}

#[test]
fn synth_train_eval_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let reports = [
        "ds/events.csv",
        "ds/nodes.csv",
        "ds/dataset.json",
        "run/train_report.json",
        "ev/eval_report.json",
    ];
    let mut first = Vec::new();
    for round in 0..2 {
        ok(SYNTH, d);
        ok(TRAIN, d);
        ok(EVAL, d);
        let now: Vec<Vec<u8>> = reports.iter().map(|f| read(d, f)).collect();
        if round == 0 {
            first = now;
        } else {
            for (f, (a, b)) in reports.iter().zip(first.iter().zip(&now)) {
                assert!(a == b, "{f} differs between runs");
            }
        }
    }
    assert_eq!(read(d, "run/checkpoint.tbdf")[..4], *b"TBDF");

    let report: serde_json::Value = serde_json::from_slice(&read(d, "run/train_report.json")).unwrap();
    assert_eq!(report["config"]["model"]["dim"], 4);
    assert_eq!(report["config"]["seed"], 4);
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
    let log = String::from_utf8(read(d, "run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.contains("\"seconds\""));

    let eval: serde_json::Value = serde_json::from_slice(&read(d, "ev/eval_report.json")).unwrap();
    let acc = eval["result"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(eval["config"], report["config"]);

    let stats = ok(&["stats", "--data", "ds"], d);
    let stats: serde_json::Value = serde_json::from_slice(&stats.stdout).unwrap();
    assert_eq!(stats["events"], 300);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(SYNTH, d);
    std::fs::write(
        d.join("cfg.json"),
        r#"{"epochs": 1, "lr": 0.02, "model": {"heads": 2, "fanout": 3}}"#,
    )
    .unwrap();
    ok(
        &[
            "train", "--data", "ds", "--out", "run", "--config", "cfg.json", "--heads", "1",
        ],
        d,
    );
    let report: serde_json::Value = serde_json::from_slice(&read(d, "run/train_report.json")).unwrap();
    assert_eq!(report["config"]["lr"], 0.02);
    assert_eq!(report["config"]["model"]["heads"], 1);
    assert_eq!(report["config"]["epochs"], 1);
}

#[test]
fn ablate_sweep_prepare_and_paths() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(SYNTH, d);
    let common = [
        "--data", "ds", "--epochs", "1", "--heads", "1", "--fanout", "2", "--seeds", "0,1",
    ];
    let mut ablate = vec!["ablate", "--out", "ab", "--variant", "full", "--variant", "-time"];
    ablate.extend(common);
    ok(&ablate, d);
    let csv = String::from_utf8(read(d, "ab/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(2).unwrap().starts_with("-time,"));
    let json: serde_json::Value = serde_json::from_slice(&read(d, "ab/ablation.json")).unwrap();
    assert!(json["rows"][1]["vs_full"]["p"].is_number());

    let mut sweep = vec!["sweep", "--out", "sw", "--grid", "0,1"];
    sweep.extend(common);
    ok(&sweep, d);
    assert_eq!(String::from_utf8(read(d, "sw/sweep.csv")).unwrap().lines().count(), 3);

    ok(
        &[
            "prepare",
            "--data",
            "ds/events.csv",
            "--bipartite",
            "--dim",
            "4",
            "--limit",
            "100",
            "--out",
            "prep",
        ],
        d,
    );
    let splits: serde_json::Value = serde_json::from_slice(&read(d, "prep/splits.json")).unwrap();
    assert_eq!(splits["test"]["end"], 100);
    assert_eq!(
        splits["val"]["end"].as_u64().unwrap() - splits["val"]["start"].as_u64().unwrap(),
        15
    );

    let out = ok(
        &[
            "paths", "--data", "ds", "--node", "u0", "--time", "1000", "--depth", "2", "--fanout", "2",
        ],
        d,
    );
    let lines = String::from_utf8(out.stdout).unwrap();
    assert!(lines.lines().count() > 0);
    for line in lines.lines() {
        let p: serde_json::Value = serde_json::from_str(line).unwrap();
        let hops = p["hops"].as_array().unwrap();
        assert!(!hops.is_empty() && hops.len() <= 2);
        let ts: Vec<f64> = hops.iter().map(|h| h["ts"].as_f64().unwrap()).collect();
        assert!(ts.windows(2).all(|w| w[1] < w[0]) && ts[0] < 1000.0);
    }
    let bad = tbdfs(&["paths", "--data", "ds", "--node", "nobody", "--time", "1"], d);
    assert_eq!(bad.status.code(), Some(1));
}
