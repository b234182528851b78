use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_polybubble");

struct Scratch(PathBuf);

impl Scratch {
    fn new(tag: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("polybubble-cli-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        Scratch(dir)
    }

    fn config(&self, json: &str) -> PathBuf {
        let p = self.0.join("config.json");
        std::fs::write(&p, json).unwrap();
        p
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> i32 {
    let status = Command::new(BIN)
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
        .status;
    status.code().unwrap()
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const LITE: &str = r#"{"n": 5, "potential": {"family": "constant", "params": {"p0": 0.0, "q0": 0.0}},
 "k_list": [1], "t": 200.0, "stages": ["constants", "pohozaev"]}"#;

const WELL: &str = r#"{"n": 5, "potential": {"family": "well", "params": {"p0": 1.0, "p2": 1.0, "q0": 1.0, "q2": 1.0}}}"#;

#[test]
fn lite_audit_passes_with_full_envelope() {
    let s = Scratch::new("lite");
    let cfg = s.config(LITE);
    let out = s.0.join("out");
    assert_eq!(run("full-audit", &cfg, &out, &[]), 0);
    let r = report(&out.join("full_audit.json"));
    for key in ["command", "version", "config_hash", "seeds", "budget", "sample", "pass", "exit_code", "result"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
    assert_eq!(r["command"], "full_audit");
    assert_eq!(r["pass"], true);
    assert_eq!(r["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(r["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(r["result"]["pohozaev"]["pass"], true);
    assert!(out.join("pohozaev.csv").exists());
    assert!(out.join("concentration.csv").exists());
}

#[test]
fn reports_are_reproducible_and_seed_sensitive() {
    let s = Scratch::new("repro");
    let cfg = s.config(LITE);
    let (a, b, c) = (s.0.join("a"), s.0.join("b"), s.0.join("c"));
    assert_eq!(run("pohozaev", &cfg, &a, &["--workers", "1"]), 0);
    assert_eq!(run("pohozaev", &cfg, &b, &["--workers", "2"]), 0);
    for f in ["pohozaev.json", "pohozaev.csv", "concentration.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    run("pohozaev", &cfg, &c, &["--seed", "7"]);
    let (ra, rc) = (report(&a.join("pohozaev.json")), report(&c.join("pohozaev.json")));
    assert_ne!(ra["config_hash"], rc["config_hash"]);
    assert_eq!(rc["seeds"]["budget"], 7);
}

#[test]
fn configuration_errors_exit_2() {
    let s = Scratch::new("config");
    let out = s.0.join("out");
    let bad = s.config(r#"{"n": 5, "potential": "#);
    assert_eq!(run("constants", &bad, &out, &[]), 2);
    let unknown = s.config(r#"{"n": 5, "potential": {"family": "well", "params": {"p0": 1.0, "q0": 1.0}}, "extra": 1}"#);
    assert_eq!(run("constants", &unknown, &out, &[]), 2);
    let dim = s.config(r#"{"n": 4, "potential": {"family": "well", "params": {"p0": 1.0, "q0": 1.0}}}"#);
    assert_eq!(run("constants", &dim, &out, &[]), 2);
    assert_eq!(run("constants", &s.0.join("missing.json"), &out, &[]), 2);
    let ok = s.config(WELL);
    assert_eq!(run("constants", &ok, &out, &["--workers", "0"]), 2);
    let status = Command::new(BIN).arg("no-such-command").output().unwrap().status;
    assert_eq!(status.code(), Some(2));
}

#[test]
fn scaling_study_needs_enough_points() {
    let s = Scratch::new("scaling");
    let out = s.0.join("out");
    let empty = s.config(WELL);
    assert_eq!(run("residual-scaling", &empty, &out, &[]), 2);
    let single = s.config(
        r#"{"n": 5, "potential": {"family": "well", "params": {"p0": 1.0, "p2": 1.0, "q0": 1.0, "q2": 1.0}}, "k_list": [6],
        "sample": {"directions": 4, "far_points": 4}}"#,
    );
    assert_eq!(run("residual-scaling", &single, &out, &[]), 3);
    let r = report(&out.join("residual_scaling.json"));
    assert_eq!(r["exit_code"], 3);
    assert!(r["result"]["error"].is_string());
}

#[test]
fn reduce_without_critical_point_exits_4() {
    let s = Scratch::new("reduce");
    let out = s.0.join("out");
    let cfg = s.config(r#"{"n": 5, "potential": {"family": "constant", "params": {"p0": 1.0, "q0": 1.0}}, "t": 1.0}"#);
    assert_eq!(run("reduce", &cfg, &out, &[]), 4);
    assert_eq!(report(&out.join("reduce.json"))["pass"], false);
}

#[test]
fn constants_report_matches_closed_form() {
    let s = Scratch::new("constants");
    let out = s.0.join("out");
    let cfg = s.config(WELL);
    assert_eq!(run("constants", &cfg, &out, &[]), 0);
    let r = report(&out.join("constants.json"));
    let c = &r["result"]["constants"];
    assert!(c["b_rel_error"].as_f64().unwrap() < 1e-8);
    assert!(c["c_rel_error"].as_f64().unwrap() < 1e-8);
    assert_eq!(r["result"]["kappa"], 1.0);
}
