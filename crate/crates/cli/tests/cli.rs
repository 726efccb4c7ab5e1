use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ecrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecrank"))
        .args(args)
        .env_remove("ECRANK_CACHE_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/curves_conductor_le_100.csv")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ingest(dir: &Path) -> PathBuf {
    let cache = dir.join("c.apqv");
    let out = ecrank(&["ingest", "--csv", s(&fixture()), "--bound", "100", "--out", s(&cache)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    cache
}

#[test]
fn ap_table_for_11a1() {
    let out = ecrank(&["ap", "--curve", "0,-1,1,-10,-20", "--conductor", "11", "--bound", "12"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().next(), Some("p,a_p,reduction"));
    assert!(text.lines().any(|l| l == "11,1,split"), "{text}");
    assert!(text.lines().any(|l| l == "2,-2,good"));
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    assert_eq!(ecrank(&["ap", "--curve", "0,1", "--conductor", "11", "--bound", "12"]).status.code(), Some(2));
    assert_eq!(ecrank(&["train", "--bogus"]).status.code(), Some(2));
    // conductor inconsistent with the discriminant
    assert_eq!(ecrank(&["ap", "--curve", "0,-1,1,-10,-20", "--conductor", "13", "--bound", "12"]).status.code(), Some(3));
    assert_eq!(ecrank(&["mn", "--cache", "/nonexistent/cache", "--bound", "10"]).status.code(), Some(3));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.apqs"), dir.path().join("b.apqs"));
    for p in [&a, &b] {
        let out = ecrank(&["synth", "--count", "1000", "--bound", "100", "--seed", "7", "--out", s(p)]);
        assert!(out.status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(dir.path().join("a.apqs.manifest.json").exists());
    assert!(!dir.path().join("a.apqs.lock").exists());
}

#[test]
fn train_then_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cache = ingest(dir.path());
    let run = dir.path().join("run");
    let out = ecrank(&[
        "train", "--cache", s(&cache), "--epochs", "2", "--seed", "3", "--batch-size", "16",
        "--steps-per-epoch", "2", "--out", s(&run),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run_manifest.json")).unwrap()).unwrap();
    let last = manifest["records"].as_array().unwrap().last().unwrap()["accuracy"].as_f64().unwrap();
    let eval = ecrank(&["eval", "--model", s(&run.join("model.ecnn")), "--cache", s(&cache)]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let line = stdout(&eval).lines().next().unwrap().to_string();
    let acc: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert_eq!(acc, last);

    let sal = dir.path().join("sal");
    let out = ecrank(&["saliency", "--run", s(&run), "--out", s(&sal)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["class_saliency.csv", "averaged_saliency.csv", "grid/index.md", "saliency_comparison_normalized.svg", "manifest.json"] {
        assert!(sal.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(sal.join("averaged_saliency.csv")).unwrap();
    assert!(csv.starts_with("epoch,step,p,w,w_tilde,mn_weight\n"));
}

#[test]
fn failed_train_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("s.apqs");
    assert!(ecrank(&["synth", "--count", "10", "--bound", "50", "--out", s(&synth)]).status.success());
    let run = dir.path().join("run");
    let out = ecrank(&["train", "--cache", s(&synth), "--epochs", "1", "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!run.exists());
}

#[test]
fn incompatible_bound_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cache = ingest(dir.path());
    let run = dir.path().join("run");
    let out = ecrank(&[
        "train", "--cache", s(&cache), "--epochs", "1", "--batch-size", "8", "--steps-per-epoch", "1", "--out", s(&run),
    ]);
    assert!(out.status.success());
    let small = dir.path().join("small.apqs");
    assert!(ecrank(&["synth", "--count", "5", "--bound", "50", "--out", s(&small)]).status.success());
    let out = ecrank(&["murmur", "--model", s(&run.join("model.ecnn")), "--input", s(&small)]);
    assert_eq!(out.status.code(), Some(3));
    let wide = dir.path().join("wide.apqs");
    assert!(ecrank(&["synth", "--count", "5", "--bound", "200", "--out", s(&wide)]).status.success());
    let out = ecrank(&["murmur", "--model", s(&run.join("model.ecnn")), "--input", s(&wide), "--bin", "20"]);
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("group,p,mean_ap,count\n"));
}

#[test]
fn sweep_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cache = ingest(dir.path());
    let csv = dir.path().join("sweep.csv");
    let out = ecrank(&[
        "sweep", "--cache", s(&cache), "--bounds", "10,50", "--epochs", "1", "--batch-size", "8",
        "--steps-per-epoch", "1", "--out", s(&csv),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "bound,prime_count,best_accuracy,seed");
    assert!(rows[1].starts_with("10,4,"));
    assert!(rows[2].starts_with("50,15,"));
    assert!(dir.path().join("sweep.svg").exists());
    let out = ecrank(&["sweep", "--cache", s(&cache), "--bounds", "1000", "--out", s(&csv)]);
    assert_eq!(out.status.code(), Some(2));
}
