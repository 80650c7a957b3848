use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cepfed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cepfed"))
        .args(args)
        .env("CEPFED_THREADS", "2")
        .output()
        .expect("spawn cepfed")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    fs::write(
        &path,
        r#"{
  "rounds": 2,
  "patience": null,
  "batch_size": 32,
  "learning_rate": 0.001,
  "dataset": {"samples_per_class": 20}
}"#,
    )
    .unwrap();
    path.to_str().unwrap().to_owned()
}

fn summary(dir: &Path, label: &str) -> serde_json::Value {
    let text = fs::read_to_string(dir.join(format!("{label}.summary.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn zero_rounds_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = cepfed(&["run", "--mode", "fedavg", "--rounds", "0", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("fedavg.metrics.csv")).unwrap();
    assert_eq!(
        csv,
        "round,client,loss,accuracy,upload_bytes,download_bytes,transmission_ratio,mean_rank_part1,mean_rank_part2,mean_rank_part3\n"
    );
    assert_eq!(summary(dir.path(), "fedavg")["rounds_run"], 0);
}

#[test]
fn same_seed_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = cepfed(&["run", "--config", &cfg, "--seed", "7", "--out", d.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ca = fs::read(a.join("ceperfed.metrics.csv")).unwrap();
    assert_eq!(ca, fs::read(b.join("ceperfed.metrics.csv")).unwrap());
    // five client rows plus one global row per round, plus the header
    assert_eq!(String::from_utf8(ca).unwrap().lines().count(), 1 + 2 * 6);
}

#[test]
fn fixed_rank_sweep_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().to_str().unwrap();
    let o = cepfed(&["run", "--config", &cfg, "--mode", "fixed_rank", "--rank", "2,4,8,16", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ratios: Vec<f64> = [2, 4, 8, 16]
        .iter()
        .map(|r| summary(dir.path(), &format!("fixed_rank_{r}"))["mean_transmission_ratio"].as_f64().unwrap())
        .collect();
    assert!(ratios.windows(2).all(|w| w[0] <= w[1]), "{ratios:?}");
}

#[test]
fn bad_config_is_rejected_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"rounds": 1, "learning_rat": 0.1}"#).unwrap();
    let o = cepfed(&["run", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("learning_rat") && err.contains("allowed top-level keys"), "{err}");

    let o = cepfed(&["run", "--mode", "fixed_rank", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    let o = cepfed(&["run", "--eta", "1.5", "--rounds", "0", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn compare_reports_and_refuses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().to_str().unwrap();
    for mode in ["ceperfed", "no_alpha"] {
        let o = cepfed(&["run", "--config", &cfg, "--mode", mode, "--seed", "3", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let base = dir.path().join("ceperfed.summary.json");
    let cand = dir.path().join("no_alpha.summary.json");

    let same = cepfed(&["compare", base.to_str().unwrap(), base.to_str().unwrap()]);
    assert!(same.status.success());
    let text = String::from_utf8_lossy(&same.stdout);
    assert!(text.contains("accuracy_delta=+0.0000") && text.contains("upload_bytes_delta=+0"), "{text}");

    let o = cepfed(&["compare", base.to_str().unwrap(), cand.to_str().unwrap(), "--tolerance", "1"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("baseline  ceperfed final_acc=") && text.contains("candidate no_alpha final_acc="), "{text}");

    let other = dir.path().join("other");
    let o = cepfed(&["run", "--config", &cfg, "--seed", "4", "--out", other.to_str().unwrap()]);
    assert!(o.status.success());
    let o = cepfed(&["compare", base.to_str().unwrap(), other.join("ceperfed.summary.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seeds differ"));
}

#[test]
fn regression_sets_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().to_str().unwrap();
    let o = cepfed(&["run", "--config", &cfg, "--seed", "5", "--out", out]);
    assert!(o.status.success());
    let base = dir.path().join("ceperfed.summary.json");
    let mut worse: serde_json::Value = serde_json::from_str(&fs::read_to_string(&base).unwrap()).unwrap();
    let acc = worse["final_accuracy"].as_f64().unwrap();
    worse["final_accuracy"] = serde_json::json!(acc - 0.5);
    let cand = dir.path().join("worse.json");
    fs::write(&cand, worse.to_string()).unwrap();
    let o = cepfed(&["compare", base.to_str().unwrap(), cand.to_str().unwrap(), "--tolerance", "0.1"]);
    assert_eq!(o.status.code(), Some(1));
}
