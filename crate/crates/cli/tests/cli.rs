use std::path::PathBuf;
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_membrelax")).args(args).output().unwrap()
}

fn model(name: &str) -> String {
    fixture(name).display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn number(o: &Output) -> f64 {
    stdout(o).trim().parse().unwrap_or_else(|_| panic!("not a number: {:?} / {}", stdout(o), stderr(o)))
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_str(&stdout(o)).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

#[test]
fn density_examples() {
    let convex = model("convex.json");
    let o = run(&["density", "--model", &convex, "--xi", "0", "--b", "0,0,0"]);
    assert!(o.status.success());
    assert_eq!(number(&o), 1.0);
    let o = run(&["density", "--model", &convex, "--recession", "--xi-unit"]);
    assert!((number(&o) - 1.0).abs() < 1e-3);
    let o = run(&["density", "--model", &model("laminate.json"), "--w-zero", "--xi", "0", "--format", "json"]);
    let v = json(&o);
    assert!((v["value"].as_f64().unwrap() - 0.5).abs() < 1e-9);
    let arg: Vec<f64> = v["argmin_b"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((arg[2].abs() - 1.0).abs() < 1e-6);
}

#[test]
fn density_over_a_sample_file() {
    let o = run(&["density", "--model", &model("convex.json"), "--samples", &model("samples.csv")]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "xi11,xi12,xi21,xi22,xi31,xi32,b1,b2,b3,density");
    assert_eq!(lines.len(), 2);
    let v: f64 = lines[1].rsplit(',').next().unwrap().parse().unwrap();
    assert!((v - 2f64.sqrt()).abs() < 1e-12);
}

#[test]
fn missing_model_is_a_usage_error() {
    let o = run(&["density", "--model", "/nonexistent/model.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model file not found"));
    assert!(o.stdout.is_empty());
}

#[test]
fn malformed_input_exits_two() {
    let convex = model("convex.json");
    assert_eq!(run(&["density", "--model", &convex, "--xi", "1,2"]).status.code(), Some(2));
    assert_eq!(run(&["density", "--model", &convex, "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["cell", "qstar", "--model", &convex, "--grid", "16"]).status.code(), Some(2));
    assert_eq!(run(&["verify", "--only", "bogus"]).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_membrelax"))
        .args(["density", "--model", &convex])
        .env("MEMBRELAX_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cell_examples() {
    let o = run(&["cell", "qstar", "--model", &model("convex.json"), "--xi", "0", "--b", "0,0,1", "--format", "text"]);
    assert!((number(&o) - 2f64.sqrt()).abs() < 0.02 * 2f64.sqrt());
    let o = run(&["cell", "qstar", "--model", &model("laminate.json"), "--xi", "0", "--b", "0,0,0", "--format", "json"]);
    let v = json(&o);
    assert!((v["value"].as_f64().unwrap() - 0.5).abs() < 0.03 * 0.5);
    assert!(v["q_tol"].as_f64().unwrap() > 0.0);
}

#[test]
fn sweep_writes_one_row_per_sample() {
    let o = run(&["cell", "sweep", "--model", &model("convex.json"), "--samples", &model("samples.csv")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "xi11,xi12,xi21,xi22,xi31,xi32,b1,b2,b3,value,lambda,iters,flag");
    assert_eq!(lines.len(), 2);
}

#[test]
fn failed_extrapolation_exits_three() {
    let o = run(&["density", "--model", &model("non_decaying_table.json"), "--recession", "--b", "0.7071,0,0.7071"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("residual"));
}

#[test]
fn membrane_examples() {
    let convex = model("convex.json");
    let o = run(&["membrane", "--model", &convex, "--scene", &model("atom.json")]);
    let v = json(&o);
    assert!((v["total"].as_f64().unwrap() - 2.0).abs() < 0.06);
    for key in ["bulk", "jump", "cantor", "singular", "tolerances"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    let o = run(&["membrane", "--model", &convex, "--scene", &model("jump.json"), "--no-moment"]);
    assert!((json(&o)["total"].as_f64().unwrap() - 2.0).abs() < 0.06);
    let o = run(&["membrane", "--model", &convex, "--scene", &model("atom.json"), "--loads", &model("loads.json")]);
    let v = json(&o);
    assert!((v["load_work"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!((v["net"].as_f64().unwrap() - (v["total"].as_f64().unwrap() - 1.0)).abs() < 1e-12);
}

#[test]
fn invalid_scene_exits_four() {
    let o = run(&["membrane", "--model", &model("convex.json"), "--scene", &model("trace_mismatch.json")]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("trace mismatch"));
}

#[test]
fn affine_study_passes() {
    let o = run(&["gamma", "--model", &model("convex.json"), "--scene", &model("affine.json"), "--slab", "16x16x8"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("verdict: PASS"));
    let text = stdout(&o);
    assert!(text.starts_with("eps,J_eps,E_target,rel_gap,pairing_1"));
    let last = text.lines().last().unwrap();
    let gap: f64 = last.split(',').nth(3).unwrap().parse().unwrap();
    assert!(gap <= 0.02);
}

#[test]
fn concentration_study_passes() {
    let o = run(&[
        "gamma", "--model", &model("convex.json"), "--scene", &model("dirac.json"), "--builder", "dirac", "--eps", "0.0625,0.015625", "--slab", "256x256x16",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn gamma_errors() {
    let convex = model("convex.json");
    let o = run(&["gamma", "--model", &convex, "--scene", &model("affine.json"), "--eps", "0.125,0.25"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["gamma", "--model", &convex, "--scene", &model("dirac.json"), "--builder", "dirac", "--eps", "0.015625", "--slab", "128x128x8"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("minimum grid 256x256x8"), "{}", stderr(&o));
}

#[test]
fn verify_subset_and_determinism() {
    let a = run(&["verify", "--only", "growth", "--seed", "7"]);
    assert!(a.status.success(), "{}", stdout(&a));
    let text = stdout(&a);
    let checks: Vec<&str> = text.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    assert!(!checks.is_empty());
    assert!(checks.iter().all(|l| l.split_whitespace().nth(1) == Some("growth")));
    let b = run(&["verify", "--only", "growth", "--seed", "7"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn seeded_cell_runs_are_byte_identical() {
    let args = ["cell", "qstar", "--model", &model("laminate.json"), "--xi", "0.3,0,0,0.2,0,0", "--b", "0,0,0.5", "--seed", "7", "--format", "json"];
    assert_eq!(run(&args).stdout, run(&args).stdout);
}

#[test]
fn output_files_are_written_whole_or_not_at_all() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("density.csv");
    let o = run(&["density", "--model", &model("convex.json"), "--format", "csv", "--out", out.to_str().unwrap()]);
    assert!(o.status.success() && o.stdout.is_empty());
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "xi11,xi12,xi21,xi22,xi31,xi32,b1,b2,b3,density\n0,0,0,0,0,0,0,0,0,1\n");

    let failed = dir.path().join("membrane.json");
    let o = run(&["membrane", "--model", &model("convex.json"), "--scene", &model("trace_mismatch.json"), "--out", failed.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(!failed.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}
