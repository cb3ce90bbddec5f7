use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn drugsurv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drugsurv")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = drugsurv(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    assert_eq!(text.trim().lines().count(), 1, "{text}");
    serde_json::from_str(text.trim()).unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn synth_then_evaluate_writes_table_row() {
    let dir = tempfile::tempdir().unwrap();
    let spec = path(dir.path(), "spec.json");
    fs::write(&spec, r#"{"n": 300, "seed": 1}"#).unwrap();
    let cohort = path(dir.path(), "cohort.csv");
    ok(&["synth", "--spec", &spec, "--seed", "42", "--out", &cohort]);
    assert_eq!(fs::read_to_string(&cohort).unwrap().lines().count(), 301);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(format!("{cohort}.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["provenance"]["seed"], 42);
    assert_eq!(manifest["provenance"]["format_version"], 1);
    assert_eq!(manifest["spec"]["seed"], 42);

    let out_dir = path(dir.path(), "eval");
    let stdout = ok(&["evaluate", "--model", "glm", "--cohort", &cohort, "--k", "5", "--seed", "7", "--out-dir", &out_dir]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "model,accuracy,standard_deviation,runtime_s");
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields[0], "glm");
    for f in &fields[1..] {
        let v: f64 = f.parse().unwrap();
        assert!(v >= 0.0);
    }
    for name in ["table2.csv", "folds.csv", "confusion.csv", "auc.csv", "roc.svg", "report.json", "manifest.json"] {
        assert!(Path::new(&out_dir).join(name).is_file(), "{name}");
    }
    let svg = fs::read_to_string(Path::new(&out_dir).join("roc.svg")).unwrap();
    assert!(svg.contains("seed=7"));
    let report: Value = serde_json::from_str(&fs::read_to_string(Path::new(&out_dir).join("report.json")).unwrap()).unwrap();
    assert_eq!(report["cross_validation"]["k"], 5);
    assert_eq!(report["provenance"]["config_hash"].as_str().unwrap().len(), 16);
}

#[test]
fn no_timing_writes_na() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = path(dir.path(), "cohort.csv");
    ok(&["synth", "--n", "200", "--seed", "3", "--out", &cohort]);
    let stdout = ok(&[
        "evaluate", "--model", "tree", "--cohort", &cohort, "--k", "3", "--out-dir", &path(dir.path(), "e"), "--no-timing",
    ]);
    assert!(stdout.lines().nth(1).unwrap().ends_with(",NA"));
}

#[test]
fn predict_handles_missing_weight() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = path(dir.path(), "cohort.csv");
    ok(&["synth", "--n", "300", "--seed", "5", "--out", &cohort]);
    let model = path(dir.path(), "glm.json");
    let length = path(dir.path(), "length.json");
    ok(&["train", "--model", "glm", "--cohort", &cohort, "--out", &model]);
    ok(&["train", "--model", "length_glm", "--cohort", &cohort, "--out", &length]);

    let row = path(dir.path(), "row.csv");
    fs::write(
        &row,
        "age_years,sex,height_cm,weight_kg,comorbidity_count,age_at_diagnosis,psa_diagnosis,previous_mtx,concurrent_mtx,previous_biologic,baseline_dlqi,baseline_pasi,biologic,repeat_series\n\
         51.0,female,165.0,,2,30.0,0,1,,0,14,,ustekinumab,0\n",
    )
    .unwrap();
    let stdout = ok(&["predict", "--model", &model, "--length-model", &length, "--cohort", &row]);
    let v: Value = serde_json::from_str(&stdout).unwrap();
    let probs = v["probabilities"].as_object().unwrap();
    assert_eq!(probs.len(), 6);
    let total: f64 = probs.values().map(|p| p.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert!(v["predicted_length_months"].as_f64().unwrap() >= 0.0);
    assert!(v["predicted_class"].is_string());
}

#[test]
fn optimize_emits_profile_json() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = path(dir.path(), "cohort.csv");
    ok(&["synth", "--n", "400", "--seed", "9", "--out", &cohort]);
    let model = path(dir.path(), "glm.json");
    ok(&["train", "--model", "glm", "--cohort", &cohort, "--out", &model]);
    let v: Value = serde_json::from_str(&ok(&["optimize", "--model", &model, "--min-probability", "0.5"])).unwrap();
    assert_eq!(v["target"], "continue");
    assert!(v["profile"]["patient"]["biologic"].is_string());
    assert!(v["target_probability"].as_f64().unwrap() >= 0.5);
    for c in v["constraints"].as_array().unwrap() {
        assert!(["<=", ">=", "=", "in"].contains(&c["relation"].as_str().unwrap()));
    }
    assert_eq!(v["criteria"].as_array().unwrap().len(), v["constraints"].as_array().unwrap().len());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(drugsurv(&["evaluate", "--bogus"]).status.code(), Some(2));
    assert_eq!(drugsurv(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(drugsurv(&["evaluate", "--model", "svm", "--cohort", "x.csv"]).status.code(), Some(2));
}

#[test]
fn data_errors_exit_1_with_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = drugsurv(&["evaluate", "--cohort", &path(dir.path(), "absent.csv")]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "InvalidPath");

    let bad = path(dir.path(), "bad.csv");
    fs::write(&bad, "age_years,sex\n40,male\n").unwrap();
    let out = drugsurv(&["evaluate", "--cohort", &bad]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_line(&out);
    assert_eq!(e["module"], "cohort");
    assert_eq!(e["error"], "MissingColumn");

    let cohort = path(dir.path(), "cohort.csv");
    ok(&["synth", "--n", "100", "--seed", "1", "--out", &cohort]);
    let length = path(dir.path(), "length.json");
    ok(&["train", "--model", "length_glm", "--cohort", &cohort, "--out", &length]);
    let out = drugsurv(&["optimize", "--model", &length]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "WrongKind");

    let corrupt = path(dir.path(), "corrupt.json");
    fs::write(&corrupt, "{ not json").unwrap();
    let out = drugsurv(&["optimize", "--model", &corrupt]);
    assert_eq!(error_line(&out)["error"], "CorruptFile");
}
