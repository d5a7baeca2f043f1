use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vcnf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcnf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const OT_SMALL: &str = r#"
[problem]
kind = "ot"
p0 = { kind = "gaussian", mean = [-1.0, 0.0] }
p1 = { kind = "gaussian", mean = [1.0, 0.0] }

[train]
steps = 50
n_t = 2
n_k = 8
n_b = 16
n_eval = 1000
"#;

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("exp.toml");
    let out = dir.join("run");
    fs::write(&path, format!("output = {:?}\n{body}", out.display().to_string())).unwrap();
    path.display().to_string()
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let o = vcnf(&["train", "/no/such/exp.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/exp.toml"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), OT_SMALL);
    let o = vcnf(&["train", &cfg, "--set", "train.stepz=3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn short_training_run_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), OT_SMALL);
    let o = vcnf(&["train", &cfg, "--set", "train.steps=10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "ok");
    assert_eq!(summary["benchmark"].as_f64().unwrap(), 2.0);
    assert!(summary["objective"].as_f64().unwrap().is_finite());
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 11);
    assert!(run.join("config.resolved.toml").exists());

    // same config, same bytes
    let first = fs::read(run.join("metrics.csv")).unwrap();
    assert!(vcnf(&["train", &cfg, "--set", "train.steps=10"]).status.success());
    assert_eq!(first, fs::read(run.join("metrics.csv")).unwrap());

    let model = run.join("model.json").display().to_string();
    let e = vcnf(&["eval", &model, &cfg, "--set", "train.steps=10", "--n-eval", "1000"]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let eval: serde_json::Value = serde_json::from_str(&stdout(&e)).unwrap();
    assert_eq!(eval["objective"], summary["objective"]);

    let t = vcnf(&["dump", &model, "trajectories", "--starts", "-1,0;1,0", "--steps", "3"]);
    assert!(t.status.success());
    assert_eq!(stdout(&t).lines().count(), 1 + 2 * 3);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), OT_SMALL);
    let run = dir.path().join("run");
    let set = ["--set", "train.steps=5", "--set", "train.n_k=40"];
    let mut a = vec!["--threads", "1", "train", &cfg];
    a.extend(set);
    assert!(vcnf(&a).status.success());
    let one = fs::read(run.join("metrics.csv")).unwrap();
    a[1] = "3";
    assert!(vcnf(&a).status.success());
    assert_eq!(one, fs::read(run.join("metrics.csv")).unwrap());
}

#[test]
fn oracle_rwpo_cost() {
    let o = vcnf(&["oracle", "rwpo-cost", "--d", "2", "--beta", "1", "--T", "1"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let row = out.lines().nth(1).unwrap();
    let value: f64 = row.split(',').find_map(|f| f.parse().ok()).unwrap();
    assert!((value - 3.3863).abs() < 1e-4, "{row}");
}

#[test]
fn oracle_w2_case5() {
    let o = vcnf(&["oracle", "w2", "--mu0", "0,0", "--cov0", "1,0;0,0.25", "--mu1", "0,0", "--cov1", "1,0;0,1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains(",0.125"), "{}", stdout(&o));
}

#[test]
fn oracle_ou_moment_at_zero_is_m0() {
    let o = vcnf(&["oracle", "ou-moment", "--t", "0", "--m0", "8"]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().nth(1).unwrap().contains(",8,"), "{}", stdout(&o));
}

#[test]
fn identity_density_dump_is_standard_normal() {
    let dir = tempfile::tempdir().unwrap();
    // freshly initialized flows are the identity at every t
    let stem = dir.path().join("identity");
    vcnf::FlowModel::new(vcnf::FlowArch::new(2), 0).unwrap().save(&stem).unwrap();
    let model = stem.with_extension("json").display().to_string();
    let o = vcnf(&["dump", &model, "density", "--grid", "5", "--half-width", "2", "--times", "0.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("x1,x2,t,density"));
    for line in lines {
        let v: Vec<f64> = line.split(',').map(|f| f.parse().unwrap()).collect();
        let expect = (-(v[0] * v[0] + v[1] * v[1]) / 2.0).exp() / (2.0 * std::f64::consts::PI);
        assert!((v[3] - expect).abs() < 1e-12, "{line}");
    }
}

#[test]
fn verify_suite_passes() {
    let o = vcnf(&["verify", "--suite", "spline"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn unknown_suite_is_a_config_error() {
    assert_eq!(vcnf(&["verify", "--suite", "bogus"]).status.code(), Some(2));
}
