use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn riim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riim"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn schema(name: &str) -> Value {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(name);
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_valid(schema_file: &str, doc: &Value) {
    let validator = jsonschema::validator_for(&schema(schema_file)).unwrap();
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{schema_file}: {errors:?}\n{doc:#}");
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

/// Pairs with a covariate; the dose equals the instrument in even sets and
/// is always taken in odd ones, and `y = 2 d` exactly.
fn pairs(n_sets: usize) -> String {
    let mut s = String::from("set_id,z,y,d,e_hat,x1\n");
    for i in 0..n_sets {
        for (z, e) in [(1, 0.4 + 0.01 * i as f64), (0, 0.35)] {
            let d = if i % 2 == 0 { z } else { 1 };
            s.push_str(&format!("P{i},{z},{},{d},{e},{}\n", 2 * d, i as f64 * 0.1 + z as f64));
        }
    }
    s
}

fn report(out: &Output) -> Value {
    assert_eq!(code(out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn ate_report_validates_and_uniform_ippw_equals_diff_in_means() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "pairs.csv", &pairs(12));
    let r = report(&riim(
        dir.path(),
        &["analyze-ate", "--input", "pairs.csv", "--estimator", "dim,ippw", "--prob-source", "uniform"],
    ));
    assert_valid("riim-report-v1.schema.json", &r);
    assert_valid("riim-manifest-v1.schema.json", &r["manifest"]);
    let res = r["results"].as_array().unwrap();
    assert_eq!(res[0]["estimate"], res[1]["estimate"]);
    assert_eq!(res[0]["variance"], res[1]["variance"]);
    assert_eq!(res[1]["prob_source"], "uniform");
}

#[test]
fn out_flag_writes_report_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "pairs.csv", &pairs(12));
    let out = riim(
        dir.path(),
        &["analyze-ate", "--input", "pairs.csv", "--estimator", "dim,ippw,fpw", "--out", "r.json"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_valid("riim-report-v1.schema.json", &r);
    let m: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r.json.manifest.json")).unwrap()).unwrap();
    assert_valid("riim-manifest-v1.schema.json", &m);
    assert_eq!(m["inputs"][0]["sha256"], r["input"]["sha256"]);
    assert_eq!(m["options"]["propensity"]["learner"], "external");
}

#[test]
fn missing_outcome_column_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.csv", "set_id,z,x1\nA,1,0\nA,0,1\n");
    let out = riim(dir.path(), &["analyze-ate", "--input", "bad.csv"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains('y'));
}

#[test]
fn saturated_covariate_design_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = String::from("set_id,z,y,x1,x2\n");
    for i in 0..3 {
        s.push_str(&format!("S{i},1,{i},{i},{}\nS{i},0,0,0,1\n", i * i));
    }
    write(dir.path(), "small.csv", &s);
    let out = riim(dir.path(), &["analyze-ate", "--input", "small.csv", "--estimator", "dim", "--q", "covmeans"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rank"));
}

#[test]
fn iv_with_exact_ratio_recovers_two() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "pairs.csv", &pairs(12));
    let r = report(&riim(dir.path(), &["analyze-iv", "--input", "pairs.csv", "--grid-range=-5,5"]));
    assert_valid("riim-report-v1.schema.json", &r);
    for res in r["results"].as_array().unwrap() {
        let theta = res["point_estimate"].as_f64().unwrap();
        assert!((theta - 2.0).abs() < 1e-12, "{res}");
        assert_eq!(res["grid"]["disagreements"], 0);
    }
}

#[test]
fn iv_without_dose_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "nodose.csv", "set_id,z,y\nA,1,1\nA,0,0\nB,1,2\nB,0,1\n");
    let out = riim(dir.path(), &["analyze-iv", "--input", "nodose.csv"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn weak_instrument_is_reported_not_failed() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = String::from("set_id,z,y,d\n");
    for i in 0..10 {
        let shift = if i % 2 == 0 { 0.5 } else { -0.5 };
        s.push_str(&format!("S{i},1,{},1\nS{i},0,{},1\n", i % 3, f64::from(i % 3) + shift));
    }
    write(dir.path(), "weak.csv", &s);
    let r = report(&riim(dir.path(), &["analyze-iv", "--input", "weak.csv", "--estimator", "classical"]));
    assert_valid("riim-report-v1.schema.json", &r);
    let res = &r["results"][0];
    assert_eq!(res["weak_iv_flag"], true);
    assert_eq!(res["point_estimate"], Value::Null);
    assert_eq!(res["confidence_set"]["shape"], "whole_line");
}

#[test]
fn matching_all_treated_units_is_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "treated.csv", "z,y,e_hat\n1,1,0.3\n1,2,0.4\n1,0,0.5\n");
    let out = riim(dir.path(), &["match", "--input", "treated.csv", "--out", "m.csv"]);
    assert_eq!(code(&out), 3);
    assert!(!dir.path().join("m.csv").exists());
}

#[test]
fn match_then_analyze_and_balance() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = String::from("z,y,x1,x2\n");
    for k in 0..40 {
        let x1 = (k as f64 * 0.37).sin();
        let x2 = (k as f64 * 1.3).cos();
        let z = (k % 3 == 0) as u8;
        s.push_str(&format!("{z},{},{x1},{x2}\n", x1 + f64::from(z)));
    }
    write(dir.path(), "raw.csv", &s);
    let out = riim(
        dir.path(),
        &["match", "--input", "raw.csv", "--out", "m.csv", "--learner", "logistic", "--max-set-size", "4"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let matched = fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert!(matched.starts_with("set_id,z,y,e_hat,x1,x2"));
    assert_eq!(matched.lines().count(), 41);
    assert_eq!(fs::read_to_string(dir.path().join("dropped.csv")).unwrap(), "row,z,e_hat\n");
    let m: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("m.csv.manifest.json")).unwrap()).unwrap();
    assert_valid("riim-manifest-v1.schema.json", &m);

    let r = report(&riim(dir.path(), &["analyze-ate", "--input", "m.csv"]));
    assert_eq!(r["N"], 40);

    let out = riim(dir.path(), &["balance", "--input", "m.csv", "--pre", "raw.csv", "--out", "b.csv"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(dir.path().join("b.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "covariate,smd_pre,smd_post,degenerate");
    assert!(lines[1].starts_with("x1,") && lines[2].starts_with("x2,"));
}

#[test]
fn simulate_is_byte_identical_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str, workers: &str| {
        let o = riim(
            dir.path(),
            &[
                "simulate", "--study", "ate", "--model", "1", "--reps", "6", "--n", "200", "--seed", "7", "--workers",
                workers, "--out", out,
            ],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        (fs::read(dir.path().join(out)).unwrap(), o.stdout)
    };
    let a = run("a.csv", "1");
    let b = run("b.csv", "1");
    let c = run("c.csv", "4");
    assert_eq!(a, b);
    assert_eq!(a, c);
    let m: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a.csv.manifest.json")).unwrap()).unwrap();
    assert_valid("riim-manifest-v1.schema.json", &m);
    assert_eq!(m["seed"], 7);
}

#[test]
fn simulate_config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "sim.cfg", "# small IV run\nstudy = iv\nreps = 50\nn = 200\nseed = 5\n");
    let out = riim(dir.path(), &["simulate", "--config", "sim.cfg", "--reps", "2", "--out", "s.csv"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.starts_with("iv,1,off,") && r.contains(",2,")));
}

#[test]
fn bad_simulation_setting_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = riim(dir.path(), &["simulate", "--estimators", "bogus", "--reps", "1", "--out", "s.csv"]);
    assert_eq!(code(&out), 2);
}
