//! End-to-end runs of the `polymer` binary: output schemas, exit codes and
//! reproducibility.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_polymer");
const ESTIMATE: &str = "quantity,beta,t,env_batch,value,stderr,n,censored_count";

fn polymer(out: &Path, args: &[&str], threads: &str) -> Output {
    Command::new(BIN).args(args).arg("--out").arg(out).env("POLYMER_THREADS", threads).output().expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = polymer(out, args, "2");
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    std::fs::read_to_string(out.join("results.csv")).unwrap()
}

fn results(out: &Path) -> Value {
    let v: Value = serde_json::from_str(&std::fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    v["results"].clone()
}

/// Small invocations of every experiment.
fn tiny() -> Vec<(&'static str, Vec<&'static str>, &'static str)> {
    let smc = ["--n-env", "3", "--n-particles", "400", "--seed", "5"];
    let with = |extra: &[&'static str]| -> Vec<&'static str> { extra.iter().chain(smc.iter()).copied().collect() };
    vec![
        ("sample-env", vec!["sample-env", "--t", "2"], "index,time,x1"),
        ("estimate-z", with(&["estimate-z", "--t", "2", "--n-paths", "2000"]), ESTIMATE),
        ("free-energy", with(&["free-energy", "--t", "2,3"]), ESTIMATE),
        ("beta-sweep", with(&["beta-sweep", "--t", "2,3", "--betas", "0,inf"]), ESTIMATE),
        ("superadditivity", with(&["superadditivity", "--s", "2", "--t", "2"]), ESTIMATE),
        ("concentration", vec!["concentration", "--t", "2,3", "--n-env", "50", "--n-particles", "80", "--seed", "5"], ESTIMATE),
        ("stripe-influence", with(&["stripe-influence", "--t", "3", "--stripe", "1"]), ESTIMATE),
        ("strategy-verify", vec!["strategy-verify", "--t", "3", "--n-env", "2", "--n-paths", "200", "--seed", "5"], "env,strategy,strategy_stderr,tube,tube_stderr,disasters,renewals"),
        ("orderstat-check", vec!["orderstat-check", "--n-samples", "2000", "--k", "2,3", "--seed", "5"], "test,k,statistic,p_value,n,passes"),
        ("dispersion", with(&["dispersion", "--t", "2,4"]), ESTIMATE),
        ("nonintegrability", vec!["nonintegrability", "--n-samples", "2000", "--seed", "5"], "variant,m,mean,stderr"),
    ]
}

#[test]
fn golden_headers_and_thread_independence() {
    let dir = tempfile::tempdir().unwrap();
    for (name, args, header) in tiny() {
        let a = dir.path().join(format!("{name}-1"));
        let b = dir.path().join(format!("{name}-3"));
        let oa = polymer(&a, &args, "1");
        let ob = polymer(&b, &args, "3");
        assert!(oa.status.success() && ob.status.success(), "{name}: {}", String::from_utf8_lossy(&oa.stderr));
        let csv = std::fs::read_to_string(a.join("results.csv")).unwrap();
        assert_eq!(csv.lines().next(), Some(header), "{name}");
        assert!(csv.lines().count() > 1, "{name} wrote no rows");
        assert!(!csv.contains('\r'));
        assert_eq!(csv, std::fs::read_to_string(b.join("results.csv")).unwrap(), "{name} differs across thread counts");
        assert_eq!(results(&a), results(&b), "{name} JSON results differ across thread counts");
        let doc: Value = serde_json::from_str(&std::fs::read_to_string(a.join("results.json")).unwrap()).unwrap();
        assert_eq!(doc["experiment"], name);
        assert_eq!(doc["config"]["seed"], if name == "sample-env" { 1 } else { 5 });
        assert!(doc["version"].as_str().unwrap().starts_with('v'));
        assert!(doc["wall_time_seconds"].as_f64().unwrap() >= 0.0);
        assert_eq!(doc["seed_provenance"]["master"], doc["config"]["seed"]);
    }
}

#[test]
fn repeated_free_energy_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["free-energy", "--beta", "inf", "--t", "2,4,8", "--n-env", "10", "--n-particles", "800", "--seed", "1"];
    let a = ok(&dir.path().join("a"), &args);
    let b = ok(&dir.path().join("b"), &args);
    assert_eq!(a, b);
    assert!(a.lines().any(|l| l.starts_with("p_hat,inf,,,")));
}

#[test]
fn estimate_z_single_disaster_anchor() {
    let dir = tempfile::tempdir().unwrap();
    let env = dir.path().join("env.json");
    std::fs::write(&env, r#"{"dimension": 1, "window": {"t_max": 2, "box": [[-4.5, 4.5]]}, "disasters": [[1, 0]]}"#).unwrap();
    let csv = ok(
        &dir.path().join("out"),
        &["estimate-z", "--env", env.to_str().unwrap(), "--beta", "inf", "--t", "2", "--n-particles", "20000", "--n-paths", "100000"],
    );
    let exact = 0.617075;
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (value, stderr): (f64, f64) = (f[4].parse().unwrap(), f[5].parse().unwrap());
        match f[0] {
            "z_oracle" => assert!((value - exact).abs() < 1e-4, "{line}"),
            _ => assert!((value - exact).abs() <= 3.0 * stderr, "{line}"),
        }
    }
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = polymer(dir.path(), &["free-energy", "--beta", "-1"], "1");
    assert_eq!(o.status.code(), Some(2));
    let o = polymer(dir.path(), &["no-such-experiment"], "1");
    assert_eq!(o.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&o.stderr);
    for name in ["sample-env", "beta-sweep", "orderstat-check", "nonintegrability"] {
        assert!(msg.contains(name), "{msg}");
    }
    let o = polymer(dir.path(), &["free-energy", "--t", "4,2"], "1");
    assert_eq!(o.status.code(), Some(2));
    let o = polymer(dir.path(), &["free-energy", "--ess-threshold", "1.5"], "1");
    assert_eq!(o.status.code(), Some(2));
    // Two particles and no resampling: every run dies out, even after escalation.
    let o = polymer(
        dir.path(),
        &["free-energy", "--t", "24", "--slab", "24", "--islands", "1", "--n-particles", "2", "--n-env", "4"],
        "1",
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"t": [2, 3], "n_env": 2, "beta": 1, "seed": 4}"#).unwrap();
    let out = dir.path().join("o");
    let csv = ok(&out, &["free-energy", "--config", cfg.to_str().unwrap(), "--beta", "inf", "--n-particles", "200"]);
    assert!(csv.lines().nth(1).unwrap().starts_with("a_hat,inf,2,0,"));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(doc["config"]["n_env"], 2);
    assert_eq!(doc["config"]["seed"], 4);
    std::fs::write(&cfg, r#"{"bogus_field": 1}"#).unwrap();
    let o = polymer(&out, &["free-energy", "--config", cfg.to_str().unwrap()], "1");
    assert_eq!(o.status.code(), Some(2));
}
