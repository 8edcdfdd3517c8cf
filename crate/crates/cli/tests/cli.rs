//! End-to-end runs of the `peereffect` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seeds = [1, 2]
estimators = ["naive", "2sls", "loo"]

[data]
n = 300
d = 3
graph = { model = "erdos_renyi", p = 0.03 }

[data.params]
confounding = 1.0
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_peereffect"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, cfg: &str, name: &str) -> std::path::PathBuf {
    let out = dir.join(name);
    let o = run(&["generate", "--config", cfg, "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn generate_writes_a_deterministic_dataset_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let a = generate(tmp.path(), &cfg, "a");
    let b = generate(tmp.path(), &cfg, "b");
    assert!(a.join("config.resolved.toml").exists());
    for f in ["graph.txt", "X.csv", "Y.csv", "U.csv", "truth.json"] {
        let fa = fs::read(a.join(f)).unwrap_or_else(|_| panic!("missing {f}"));
        assert_eq!(fa, fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let other = tmp.path().join("c");
    let o = run(&["generate", "--config", &cfg, "--out", path(&other), "--seed-override", "9"]);
    assert!(o.status.success());
    assert_ne!(fs::read(a.join("Y.csv")).unwrap(), fs::read(other.join("Y.csv")).unwrap());
}

#[test]
fn explosive_beta_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}beta = 1.2\n"));
    let o = run(&["generate", "--config", &cfg, "--out", path(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn estimate_reports_bias_when_truth_is_known() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let data = generate(tmp.path(), &cfg, "data");
    let o = run(&["estimate", "--data", path(&data), "--estimator", "2sls"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(data.join("2sls_result.txt")).unwrap();
    assert!(data.join("2sls_per_node.csv").exists());
    for key in ["pe_hat = ", "abs_bias = ", "rel_bias = "] {
        assert!(text.contains(key), "missing {key} in\n{text}");
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("pe_hat"));
}

#[test]
fn estimate_without_truth_reports_only_the_estimate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let data = generate(tmp.path(), &cfg, "data");
    fs::remove_file(data.join("truth.json")).unwrap();
    fs::remove_file(data.join("U.csv")).unwrap();
    let out = tmp.path().join("res");
    let o = run(&["estimate", "--data", path(&data), "--estimator", "naive", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let result = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().ends_with("_result.txt"))
        .expect("result file");
    let text = fs::read_to_string(result).unwrap();
    assert!(text.contains("pe_hat = "));
    assert!(!text.contains("abs_bias"));
    assert!(!text.contains("rel_bias"));
}

#[test]
fn unknown_estimator_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let data = generate(tmp.path(), &cfg, "data");
    let o = run(&["estimate", "--data", path(&data), "--estimator", "ces"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dig2rsi"));
}

#[test]
fn benchmark_output_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let o = run(&["benchmark", "--config", &cfg, "--out", path(dir)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["aggregate.csv", "runs.csv", "long.csv", "table.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let agg = fs::read_to_string(a.join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 4);
}

#[test]
fn sequential_and_parallel_benchmarks_match() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let a = tmp.path().join("seq");
    let b = tmp.path().join("par");
    assert!(run(&["benchmark", "--config", &cfg, "--out", path(&a), "--threads", "1"]).status.success());
    assert!(run(&["benchmark", "--config", &cfg, "--out", path(&b), "--threads", "2"]).status.success());
    assert_eq!(fs::read(a.join("aggregate.csv")).unwrap(), fs::read(b.join("aggregate.csv")).unwrap());
}

#[test]
fn benchmark_rejects_bad_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let empty = write_config(tmp.path(), &SMALL.replace(r#"["naive", "2sls", "loo"]"#, "[]"));
    assert_eq!(run(&["benchmark", "--config", &empty, "--out", path(&out)]).status.code(), Some(2));
    let cfg = write_config(tmp.path(), SMALL);
    let one = run(&["benchmark", "--config", &cfg, "--out", path(&out), "--seed-override", "3"]);
    assert_eq!(one.status.code(), Some(2));
    let unknown = write_config(tmp.path(), &format!("colour = 1\n{SMALL}"));
    assert_eq!(run(&["benchmark", "--config", &unknown, "--out", path(&out)]).status.code(), Some(2));
}

#[test]
fn sweep_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}\n[sweep]\nconfounder = [0.0, 1.0]\n"));
    let out = tmp.path().join("o");
    let o = run(&["sweep", "confounder", "--config", &cfg, "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let agg = fs::read_to_string(out.join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 1 + 2 * 3);
    assert_eq!(run(&["sweep", "dropout", "--config", &cfg, "--out", path(&out)]).status.code(), Some(2));
    // No lambda_a grid configured.
    assert_eq!(run(&["sweep", "lambda_a", "--config", &cfg, "--out", path(&out)]).status.code(), Some(2));
}
