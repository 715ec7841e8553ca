use std::path::Path;
use std::process::{Command, Output};

fn hysparse(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hysparse"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("HYSPARSE_SEED")
        .output()
        .unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn unknown_suite_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = hysparse(&["verify", "--suite", "nope"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_selection_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = hysparse(&["verify", "--suite", "selection"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("topk_vs_sort_oracle"));
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["subcommand"], "verify");
    assert_eq!(manifest["files"][0]["path"], "verify.json");
}

#[test]
fn memreport_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = hysparse(&["memreport"], dir.path());
    assert!(out.status.success());
    let r = json(&dir.path().join("memreport.json"));
    let ratio = r["reduction_ratio"].as_f64().unwrap();
    assert!((9.4..=9.5).contains(&ratio), "{ratio}");
    assert_eq!(r["full_layers"], 5);
    assert!(String::from_utf8_lossy(&out.stdout).contains("reduction ratio 9.4"));
}

#[test]
fn memreport_small_geometry_and_window_cover() {
    let dir = tempfile::tempdir().unwrap();
    assert!(hysparse(&["memreport", "--ratio", "1:3", "--layers", "36"], dir.path()).status.success());
    let r = json(&dir.path().join("memreport.json"));
    assert_eq!(r["layout"].as_str().unwrap().len(), 36);
    assert_eq!(r["full_layers"], 10);

    assert!(hysparse(&["memreport", "--context", "128"], dir.path()).status.success());
    assert_eq!(json(&dir.path().join("memreport.json"))["reduction_ratio"], 1.0);
}

#[test]
fn memreport_rejects_bad_geometry() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hysparse(&["memreport", "--ratio", "2:3"], dir.path()).status.code(), Some(2));
    assert_eq!(hysparse(&["memreport", "--layers", "1"], dir.path()).status.code(), Some(2));
}

#[test]
fn train_zero_steps_writes_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = hysparse(&["train", "--task", "copy", "--steps", "0"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("0,heldout,"));
    let acc: f64 = rows[1].rsplit(',').next().unwrap().parse().unwrap();
    assert!((acc - 1.0 / 16.0).abs() < 0.04);
}

#[test]
fn config_file_schema_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema_version": 1, "model": {"n_layers": 4}}"#).unwrap();
    let out = hysparse(&["train", "--config", bad.to_str().unwrap(), "--steps", "0"], &dir.path().join("o"));
    assert_eq!(out.status.code(), Some(2));

    let cfg = hysparse::model::ModelConfig::tiny();
    let good = dir.path().join("good.json");
    let body = serde_json::json!({ "schema_version": 1, "model": cfg });
    std::fs::write(&good, body.to_string()).unwrap();
    let out = hysparse(&["train", "--config", good.to_str().unwrap(), "--steps", "1", "--seq-len", "8"], &dir.path().join("o"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&dir.path().join("o/manifest.json"))["config"], good.to_str().unwrap());

    let wrong = dir.path().join("wrong.json");
    std::fs::write(&wrong, serde_json::json!({ "schema_version": 2, "model": cfg }).to_string()).unwrap();
    let out = hysparse(&["train", "--config", wrong.to_str().unwrap()], &dir.path().join("o"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hysparse"))
        .args(["demo", "--out"])
        .arg(dir.path())
        .env("HYSPARSE_SEED", "17")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(json(&dir.path().join("manifest.json"))["seed"], 17);
}

#[test]
fn compare_writes_three_regimes() {
    let dir = tempfile::tempdir().unwrap();
    let out = hysparse(&["compare", "--task", "needle", "--depth", "12", "--steps", "1", "--batch-size", "2"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&dir.path().join("compare.json"));
    assert_eq!(r["results"].as_array().unwrap().len(), 3);
    assert_eq!(r["schema_version"], 1);
    let csv = std::fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    assert!(csv.contains("hybrid_swa"));
}
