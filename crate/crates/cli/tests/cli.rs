use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use debiasmf::bilevel::TrainTrace;
use debiasmf::data::{load_ratings, read_ground_truth, read_split_manifest};
use debiasmf::model::{Checkpoint, FactorModel};

const BIN: &str = env!("CARGO_BIN_EXE_debiasmf");
const TOY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/toy_ratings.tsv");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate_toy(dir: &Path, seed: &str) -> PathBuf {
    let data = dir.join(format!("data_{seed}"));
    ok(&["generate", "--ratings", TOY, "--seed", seed, "--out", s(&data)]);
    data
}

#[test]
fn generate_is_byte_identical_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["generate", "--ratings", TOY, "--seed", "3", "--out", s(out)]);
    }
    for f in ["ratings.tsv", "ground_truth.tsv", "splits.tsv", "data.cfg", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn generated_files_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_toy(dir.path(), "1");
    let ds = load_ratings(data.join("ratings.tsv"), 1.0).unwrap();
    assert_eq!(ds.interactions().len(), ds.n_users() * ds.n_items());
    let splits = read_split_manifest(&ds, data.join("splits.tsv")).unwrap();
    splits.check_disjoint().unwrap();
    assert_eq!(splits.test.len(), 10 * ds.n_users());
    assert!(!splits.unbiased_val.is_empty() && !splits.hyper_val.is_empty());
    let truth = read_ground_truth::<f64>(&ds, data.join("ground_truth.tsv")).unwrap();
    assert_eq!(truth.n_users(), ds.n_users());
}

#[test]
fn certain_relevance_and_exposure_give_all_positive_feedback() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&["generate", "--ratings", TOY, "--gamma-const", "1", "--m-const", "1", "--out", s(&out)]);
    let ds = load_ratings(out.join("ratings.tsv"), 1.0).unwrap();
    assert_eq!(ds.n_positive(), ds.interactions().len());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# toy settings\ntest-items-per-user = 4\nseed = 2\n").unwrap();
    let a = dir.path().join("a");
    ok(&["generate", "--config", s(&cfg), "--ratings", TOY, "--out", s(&a)]);
    let b = dir.path().join("b");
    ok(&["generate", "--config", s(&cfg), "--ratings", TOY, "--test-items-per-user", "6", "--out", s(&b)]);
    let count = |d: &Path| {
        let ds = load_ratings(d.join("ratings.tsv"), 1.0).unwrap();
        read_split_manifest(&ds, d.join("splits.tsv")).unwrap().test.len() / ds.n_users()
    };
    assert_eq!((count(&a), count(&b)), (4, 6));
}

#[test]
fn train_writes_one_trace_per_seed_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_toy(dir.path(), "1");
    let runs = dir.path().join("runs");
    ok(&["train", "--data", s(&data), "--methods", "ubo", "--seeds", "1,2,3,4,5", "--epochs", "2", "--out", s(&runs)]);
    for seed in 1..=5 {
        let text = fs::read_to_string(runs.join(format!("ubo/seed_{seed}/trace.jsonl"))).unwrap();
        let trace = TrainTrace::from_jsonl(&text).unwrap();
        assert_eq!(trace.epochs().count(), 2);
        assert!(trace.epochs().all(|e| e.pcc.is_some()));
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(runs.join("manifest.json")).unwrap()).unwrap();
    let entry = &manifest["commands"]["train"];
    assert_eq!(entry["artifacts"].as_array().unwrap().len(), 10);
    assert_eq!(entry["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn zero_epochs_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_toy(dir.path(), "1");
    let runs = dir.path().join("runs");
    ok(&["train", "--data", s(&data), "--methods", "relmf", "--seeds", "7", "--epochs", "0", "--dim", "6", "--out", s(&runs)]);
    let ckpt = Checkpoint::<f64>::read(runs.join("relmf/seed_7/checkpoint.bin")).unwrap();
    let m = &ckpt.model;
    assert_eq!(*m, FactorModel::init(m.n_users(), m.n_items(), 6, 7, 0.1).unwrap());
    assert!(ckpt.exposure.is_none());
}

#[test]
fn divergence_reports_the_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_toy(dir.path(), "1");
    let runs = dir.path().join("runs");
    let out = run(&["train", "--data", s(&data), "--optimizer", "sgd", "--inner-lr", "1e12", "--epochs", "3", "--out", s(&runs)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("diverged at epoch 1"), "{err}");
}

#[test]
fn evaluate_reports_metrics_and_missing_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_toy(dir.path(), "1");
    let runs = dir.path().join("runs");
    ok(&["train", "--data", s(&data), "--methods", "umf,naive", "--seeds", "1,2", "--epochs", "2", "--out", s(&runs)]);
    ok(&["evaluate", "--data", s(&data), "--out", s(&runs)]);
    let csv = fs::read_to_string(runs.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("method,seed,metric,K,value\n"));
    assert!(csv.contains("umf,all,dcg_mean,3,"));
    assert!(csv.contains("umf,all,dcg_std,3,"));
    assert!(csv.contains("umf,1,pcc,0,"));
    assert!(!csv.contains("naive,1,pcc"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(runs.join("metrics.json")).unwrap()).unwrap();
    assert!(!json["rows"].as_array().unwrap().is_empty());

    let out = run(&["evaluate", "--data", s(&data), "--out", s(&runs), "--methods", "umf", "--seeds", "1,9"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("seed 9"), "{err}");
}

#[test]
fn variance_study_single_point() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["variance-study", "--gammas", "0.4", "--m-bars", "1", "--ps", "0.6", "--samples", "20000", "--out", s(dir.path())]);
    let text = fs::read_to_string(dir.path().join("variance.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let cols: Vec<f64> = lines[1].split(',').map(|c| c.parse().unwrap()).collect();
    assert_eq!(cols[3], cols[5]);
}

#[test]
fn grad_check_passes_by_default_and_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["grad-check", "--instances", "5", "--out", s(dir.path())]);
    let report = String::from_utf8_lossy(&out.stdout);
    assert!(report.lines().all(|l| l.starts_with("PASS")), "{report}");
    assert!(dir.path().join("grad_check.txt").exists());

    let out = run(&["grad-check", "--instances", "2", "--zero-tol=-1", "--out", s(dir.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("positive-only"), "{err}");
}

#[test]
fn unknown_method_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_toy(dir.path(), "1");
    let out = run(&["train", "--data", s(&data), "--methods", "expomf", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("expomf"));
}
