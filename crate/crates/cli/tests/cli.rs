use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cyber0(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cyber0"))
        .args(args)
        .env_remove("CYBER0_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SYNTHETIC: &str = r#"
seeds = [3, 4]
n = 6
f = 1
strategy = "unbiased"
k = 8
epochs = 12
eval_every = 4
batch_size = 16
parallel = true

[dataset]
kind = "synthetic"
samples = 240
test_samples = 60
dim = 6
classes = 3

[rule]
base = "cwtm"
beta = 0.2

[attack]
kind = "alie"
"#;

#[test]
fn dry_run_prints_defaults_and_forecast() {
    let o = cyber0(&["dry-run", "--set", "f=10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for line in ["mu = 0.001", "eta = 0.01", "batch_size = 64", "epochs = 400", "k = 64", "f = 10"] {
        assert!(text.lines().any(|l| l.trim() == line), "missing `{line}` in\n{text}");
    }
    assert!(text.contains("# model dimension:            7840"), "{text}");
    assert!(text.contains("# per client over the run:    25600"), "{text}");
    let fedavg = stdout(&cyber0(&["run", "--dry-run", "--set", "strategy=fedavg"]));
    assert!(fedavg.contains("# per client over the run:    3136000"), "{fedavg}");
}

#[test]
fn dry_run_output_reparses_to_the_same_config() {
    let dir = tempfile::tempdir().unwrap();
    let first = stdout(&cyber0(&["dry-run", "--set", "rule.base=krum", "--set", "f=5", "--set", "seeds=[1,2]"]));
    let path = dir.path().join("echo.toml");
    fs::write(&path, &first).unwrap();
    let second = stdout(&cyber0(&["dry-run", "--config", path.to_str().unwrap()]));
    assert_eq!(first, second);
}

#[test]
fn invalid_configs_are_rejected() {
    let o = cyber0(&["dry-run", "--set", "f=20"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("`f`"), "{}", stderr(&o));

    let o = cyber0(&["dry-run", "--set", "learning_rate=0.1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let o = cyber0(&["dry-run", "--set", "eta=0"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("eta"), "{}", stderr(&o));
}

#[test]
fn verify_reports_each_check() {
    let o = cyber0(&["verify", "agg-oracles"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().count() >= 4);
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");

    let o = cyber0(&["verify", "no-such-suite"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown suite"));
}

fn run_synthetic(root: &Path, name: &str) -> std::path::PathBuf {
    let cfg = root.join("synthetic.toml");
    fs::write(&cfg, SYNTHETIC).unwrap();
    let out = root.join(name);
    let o = cyber0(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn reruns_are_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    let a = run_synthetic(root.path(), "a");
    let b = run_synthetic(root.path(), "b");
    for file in ["effective_config.toml", "metrics_seed_3.csv", "metrics_seed_4.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let csv = fs::read_to_string(a.join("metrics_seed_3.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "epoch,seed,accuracy,train_loss,uplink_scalars,downlink_scalars,wall_ms");
    let epochs: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["4", "8", "12"]);
}

/// Per-seed values parsed back out of the CSV files.
fn column_by_seed(dir: &Path, seed: u64, column: usize) -> Vec<f64> {
    fs::read_to_string(dir.join(format!("metrics_seed_{seed}.csv")))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(column).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn summary_matches_the_per_seed_files() {
    let root = tempfile::tempdir().unwrap();
    let out = run_synthetic(root.path(), "out");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let check = |cell: &str, values: Vec<f64>| {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt();
        let got = &summary["cells"][cell];
        assert!((got["mean"].as_f64().unwrap() - mean).abs() <= 1e-12, "{cell} mean");
        assert!((got["std"].as_f64().unwrap() - std).abs() <= 1e-12, "{cell} std");
    };
    let max = |s| column_by_seed(&out, s, 2).into_iter().fold(f64::NEG_INFINITY, f64::max);
    let last = |s, c| *column_by_seed(&out, s, c).last().unwrap();
    check("max_accuracy", vec![max(3), max(4)]);
    check("final_accuracy", vec![last(3, 2), last(4, 2)]);
    check("final_train_loss", vec![last(3, 3), last(4, 3)]);
    // 12 epochs of L·K = 8 scalars.
    assert_eq!(summary["uplink_scalars_per_client"], 96);
    assert_eq!(column_by_seed(&out, 3, 4), vec![32.0, 64.0, 96.0]);
}

#[test]
fn failed_run_leaves_no_output() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("out");
    let missing = root.path().join("missing");
    let o = cyber0(&[
        "run",
        "--set",
        &format!("dataset.dir={}", missing.display()),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("MNIST"), "{}", stderr(&o));
    assert!(!out.exists());
    assert!(!root.path().join("out.partial").exists());
}
