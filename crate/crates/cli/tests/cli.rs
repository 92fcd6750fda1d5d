use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TOY: &str = r#"
name = "toy"

[chain]
kind = "finite"
n_states = 5
seed = 1
beta = 0.9

[basis]
name = "random:2:1"

[algorithm]
gain = "zap"
alpha = { kind = "harmonic" }
gamma = { kind = "polynomial", rho = 0.85 }

[run]
n_iterations = 100
replicas = 2
seed = 1

[eval]
n_runs = 50

[analysis]
noise_samples = 20000
"#;

fn zapstop(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_zapstop"));
    cmd.args(args).env_remove("ZAPSTOP_OUT");
    if let Some(dir) = env_out {
        cmd.env("ZAPSTOP_OUT", dir);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    zapstop(args, None)
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut rows = vec![r.headers().unwrap().iter().map(String::from).collect()];
    rows.extend(r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()));
    rows
}

fn train_toy(tmp: &Path, config: &Path, out: &str) -> PathBuf {
    let out = tmp.join(out);
    let o = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn train_writes_records_and_manifest_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "toy.toml", TOY);
    let a = train_toy(tmp.path(), &config, "a");
    let b = train_toy(tmp.path(), &config, "b");

    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(manifest["records"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest["config"]["run"]["n_iterations"], 100);
    for name in ["replica-0000.json", "replica-0001.json", "replica-0000.csv"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let record = read_json(&a.join("replica-0000.json"));
    assert_eq!(record["experiment"]["basis"]["name"], "random:2:1");
    assert_eq!(record["version"], env!("CARGO_PKG_VERSION"));
    assert!(!a.join("manifest.json.tmp").exists());

    let traj = csv_rows(&a.join("replica-0000.csv"));
    assert_eq!(traj[0], ["n", "theta_0", "theta_1"]);
    assert_eq!(traj.last().unwrap()[0], "100");
}

#[test]
fn overrides_are_echoed_into_records() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "toy.toml", TOY);
    let out = tmp.path().join("o");
    let o = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "9",
        "--replicas",
        "3",
        "--threads",
        "1",
    ]);
    assert_eq!(code(&o), 0);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["records"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["config"]["run"]["seed"], 9);
    assert_eq!(read_json(&out.join("replica-0002.json"))["seed"], 11);
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "toy.toml", TOY);
    let root = tmp.path().join("root");
    let o = zapstop(&["train", "--config", config.to_str().unwrap()], Some(&root));
    assert_eq!(code(&o), 0);
    assert!(root.join("toy").join("manifest.json").exists());
}

#[test]
fn evaluate_writes_one_row_per_record() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "toy.toml", TOY);
    let out = train_toy(tmp.path(), &config, "o");
    let o = run(&[
        "evaluate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let rows = csv_rows(&out.join("rewards.csv"));
    assert_eq!(rows[0], ["replica", "mean", "se"]);
    assert_eq!(rows.len(), 3);
    let hist = csv_rows(&out.join("reward_histogram.csv"));
    assert_eq!(hist[0], ["bin_lo", "bin_hi", "count"]);
    let total: u64 = hist[1..].iter().map(|r| r[2].parse::<u64>().unwrap()).sum();
    assert_eq!(total, 2);
    let report = read_json(&out.join("evaluation.json"));
    assert_eq!(report["config"]["eval"]["n_runs"], 50);
    assert_eq!(report["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn evaluate_without_records_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "toy.toml", TOY);
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = run(&[
        "evaluate",
        "--config",
        config.to_str().unwrap(),
        "--records",
        empty.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);

    let out = train_toy(tmp.path(), &config, "o");
    fs::write(out.join("replica-0001.json"), "{not json").unwrap();
    let o = run(&[
        "evaluate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("corrupt"));
}

#[test]
fn analyze_needs_two_replicas() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "toy.toml", TOY);
    let out = tmp.path().join("o");
    let c = config.to_str().unwrap();
    assert_eq!(
        code(&run(&[
            "train",
            "--config",
            c,
            "--out",
            out.to_str().unwrap(),
            "--replicas",
            "1"
        ])),
        0
    );
    let o = run(&[
        "analyze",
        "--config",
        c,
        "--out",
        out.to_str().unwrap(),
        "--replicas",
        "1",
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn analyze_flags_slow_identity_gain() {
    let tmp = tempfile::tempdir().unwrap();
    // alpha = 1/n with G = I on this chain leaves eigenvalues of A above -1/2.
    let text = TOY
        .replace("gain = \"zap\"", "gain = \"identity\"")
        .replace("gamma = { kind = \"polynomial\", rho = 0.85 }", "")
        .replace("n_states = 5", "n_states = 10")
        .replace("seed = 1\nbeta = 0.9", "seed = 18\nbeta = 0.95")
        .replace("random:2:1", "random:4:2")
        .replace("n_iterations = 100", "n_iterations = 2000")
        .replace("replicas = 2", "replicas = 4");
    let config = write_config(tmp.path(), "slow.toml", &text);
    let out = train_toy(tmp.path(), &config, "o");
    let o = run(&[
        "analyze",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("analysis.json"));
    assert_eq!(report["result"]["report"]["infinite_covariance"], true);
    assert!(String::from_utf8_lossy(&o.stdout).contains("infinite asymptotic covariance"));
    assert_eq!(csv_rows(&out.join("scaled_errors.csv")).len(), 5);
}

#[test]
fn analyze_zap_reports_optimal_covariance() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "toy.toml", TOY);
    let out = train_toy(tmp.path(), &config, "o");
    let o = run(&[
        "analyze",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let report = &read_json(&out.join("analysis.json"))["result"]["report"];
    assert_eq!(report["infinite_covariance"], false);
    assert!(report["trace_optimal"].as_f64().unwrap() > 0.0);
    let hist = csv_rows(&out.join("scaled_histogram.csv"));
    assert_eq!(hist[0], ["bin_lo", "bin_hi", "count"]);
}

#[test]
fn oracle_check_passes_on_tabular_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let text = TOY
        .replace("n_states = 5", "n_states = 20")
        .replace("beta = 0.9", "beta = 0.999")
        .replace("random:2:1", "tabular");
    let config = write_config(tmp.path(), "tab.toml", &text);
    let out = tmp.path().join("o");
    let o = run(&[
        "oracle-check",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let report = read_json(&out.join("oracle_check.json"));
    let checks = report["result"]["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 5);
    assert!(checks.iter().all(|c| c["passed"] == true));
    assert!(report["result"]["contraction_ratio"].as_f64().unwrap() <= 0.999);
}

#[test]
fn oracle_check_rejects_rank_deficient_basis() {
    let tmp = tempfile::tempdir().unwrap();
    let rows: Vec<Vec<f64>> = (0..5).map(|x| vec![1.0, 2.0, x as f64]).collect();
    fs::write(tmp.path().join("basis.json"), serde_json::to_string(&rows).unwrap()).unwrap();
    let text = TOY.replace("random:2:1", "matrix:basis.json");
    let config = write_config(tmp.path(), "bad.toml", &text);
    let out = tmp.path().join("o");
    let o = run(&[
        "oracle-check",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL basis_rank"));
}

#[test]
fn ode_check_writes_profile() {
    let tmp = tempfile::tempdir().unwrap();
    let text = TOY.replace("n_iterations = 100", "n_iterations = 20000")
        + "\n[snapshots]\nplan = { kind = \"geometric\", ratio = 1.05 }\n";
    let config = write_config(tmp.path(), "ode.toml", &text);
    let out = train_toy(tmp.path(), &config, "o");
    let o = run(&[
        "ode-check",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&out.join("ode_deviation.csv"));
    assert_eq!(rows[0], ["start", "deviation"]);
    assert_eq!(rows.len(), 11);
    let report = read_json(&out.join("ode_check.json"));
    assert!(report["result"]["b_decay_rate"].as_f64().is_some());
}

#[test]
fn exit_codes_distinguish_usage_and_numerical_failures() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["train"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);

    let missing = tmp.path().join("missing.toml");
    assert_eq!(code(&run(&["train", "--config", missing.to_str().unwrap()])), 1);
    let bad = write_config(
        tmp.path(),
        "bad.toml",
        &TOY.replace("n_iterations = 100", "n_iterations = 0"),
    );
    assert_eq!(code(&run(&["train", "--config", bad.to_str().unwrap()])), 1);
    let unknown = write_config(tmp.path(), "unknown.toml", &format!("{TOY}\n[extra]\nx = 1\n"));
    assert_eq!(code(&run(&["train", "--config", unknown.to_str().unwrap()])), 1);

    // A tiny divergence radius aborts every replica.
    let text = TOY.replace("[run]", "divergence_radius = 1e-6\n\n[run]");
    let config = write_config(tmp.path(), "diverge.toml", &text);
    let out = tmp.path().join("o");
    let o = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["aborted"].as_array().unwrap().len(), 2);
}
