use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fuzzy-lsmpc"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).env_remove("FUZZY_LSMPC_THREADS").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn synth_decoupled_toy_is_feasible() {
    let d = TempDir::new().unwrap();
    let o = run(&["synth", "--system", "decoupled_scalar", "--out", "o"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let g = read_json(&d.path().join("o/gains.json"));
    assert_eq!(g["certified"], Value::Bool(true));
    assert!(g["sigma"][0].as_f64().unwrap() > 0.0);
    let m = read_json(&d.path().join("o/manifest.json"));
    assert_eq!(m["command"], "synth");
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn synth_example1_is_feasible() {
    let d = TempDir::new().unwrap();
    let o = run(&["synth", "--system", "example1", "--out", "o"], d.path());
    let cert = read_json(&d.path().join("o/certificate.json"));
    assert_eq!(code(&o), 0, "failures: {}", cert["failures"]);
}

#[test]
fn lambda_override_out_of_range_is_invalid_input() {
    let d = TempDir::new().unwrap();
    let c = write(d.path(), "c.json", r#"{"hyperparams":{"lambda":[1.5,1.5,1.5]}}"#);
    let o = run(&["synth", "--config", &c, "--out", "o"], d.path());
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("λ"));
}

#[test]
fn empty_gains_file_is_invalid_input() {
    let d = TempDir::new().unwrap();
    let g = write(d.path(), "g.json", "");
    let o = run(&["verify", "--gains", &g, "--out", "o"], d.path());
    assert_eq!(code(&o), 3);
}

#[test]
fn bad_thread_count_is_invalid_input() {
    let d = TempDir::new().unwrap();
    let o = bin()
        .args(["synth", "--system", "decoupled_scalar", "--out", "o"])
        .current_dir(d.path())
        .env("FUZZY_LSMPC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 3);
    let o = bin()
        .args(["synth", "--system", "decoupled_scalar", "--out", "o"])
        .current_dir(d.path())
        .env("FUZZY_LSMPC_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
}

#[test]
fn verify_passes_certified_and_enumerates_corrupted() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(&run(&["synth", "--system", "coupled_pair", "--out", "s"], d.path())), 0);
    let good = run(&["verify", "--system", "coupled_pair", "--gains", "s/gains.json", "--out", "v"], d.path());
    let rep = read_json(&d.path().join("v/verify.json"));
    assert_eq!(code(&good), 0, "{rep}");
    assert_eq!(rep["passed"], Value::Bool(true));

    let mut g = read_json(&d.path().join("s/gains.json"));
    for ki in g["k"].as_array_mut().unwrap() {
        for m in ki.as_array_mut().unwrap() {
            for row in m.as_array_mut().unwrap() {
                for v in row.as_array_mut().unwrap() {
                    *v = Value::from(v.as_f64().unwrap() * 10.0);
                }
            }
        }
    }
    write(d.path(), "bad.json", &g.to_string());
    let bad = run(&["verify", "--system", "coupled_pair", "--gains", "bad.json", "--out", "b"], d.path());
    assert_eq!(code(&bad), 2);
    let rep = read_json(&d.path().join("b/verify.json"));
    let failed: Vec<&str> = rep["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] == Value::Bool(false))
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert!(failed.contains(&"lmi_certificate"), "{failed:?}");
    assert!(!rep["checks"][0]["detail"]["failing_blocks"].as_array().unwrap().is_empty());
}

#[test]
fn coordinate_decoupled_toy_takes_one_iteration() {
    let d = TempDir::new().unwrap();
    let o = run(&["coordinate", "--system", "decoupled_scalar", "--out", "o"], d.path());
    assert_eq!(code(&o), 0);
    let r = read_json(&d.path().join("o/coordination.json"));
    assert_eq!(r["converged"], Value::Bool(true));
    assert_eq!(r["iterations_used"], 1);
    assert!(d.path().join("o/trajectory.csv").exists());
}

#[test]
fn coordinate_example1_converges_within_three_iterations() {
    let d = TempDir::new().unwrap();
    let o = run(&["coordinate", "--system", "example1", "--out", "o"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let r = read_json(&d.path().join("o/coordination.json"));
    assert!(r["iterations_used"].as_u64().unwrap() <= 3);
}

#[test]
fn coordinate_zero_iterations_is_no_convergence() {
    let d = TempDir::new().unwrap();
    let c = write(d.path(), "c.json", r#"{"system":"decoupled_scalar","coordination":{"max_iterations":0}}"#);
    let o = run(&["coordinate", "--config", &c, "--out", "o"], d.path());
    assert_eq!(code(&o), 4);
    assert!(d.path().join("o/manifest.json").exists());
}

#[test]
fn zero_state_simulation_writes_zero_csv() {
    let d = TempDir::new().unwrap();
    let c = write(
        d.path(),
        "c.json",
        r#"{"system":"coupled_pair","simulation":{"steps":5,"initial_history":[[[0.0],[0.0]]]}}"#,
    );
    let o = run(&["simulate", "--config", &c, "--out", "o"], d.path());
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(d.path().join("o/trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "k,subsystem,state_index,x,u_index,u,d_index,d,V,Vbar,stage_cost,in_rpi"
    );
    let mut rows = 0;
    for line in lines {
        rows += 1;
        let f: Vec<&str> = line.split(',').collect();
        for v in [f[3], f[5], f[7], f[8], f[9], f[10]] {
            if !v.is_empty() {
                assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{line}");
            }
        }
    }
    assert_eq!(rows, 6 * 2);
}

#[test]
fn example2_simulation_uses_published_gains() {
    let d = TempDir::new().unwrap();
    let o = run(&["simulate", "--system", "example2", "--steps", "20", "--out", "o"], d.path());
    assert_eq!(code(&o), 0);
    let r = read_json(&d.path().join("o/report.json"));
    assert_eq!(r["gains"], "published");
    assert_eq!(r["peak_state"].as_array().unwrap().len(), 2);
}

#[test]
fn same_seed_reproduces_outputs_bit_exactly() {
    let d = TempDir::new().unwrap();
    let c = write(
        d.path(),
        "c.json",
        r#"{"system":"coupled_pair","simulation":{"steps":15,"disturbance":{"kind":"uniform"},"delays":{"kind":"random","seed":3}}}"#,
    );
    for out in ["a", "b"] {
        assert_eq!(code(&run(&["simulate", "--config", &c, "--seed", "11", "--out", out], d.path())), 0);
    }
    for f in ["trajectory.csv", "manifest.json", "report.json", "system.json"] {
        let a = std::fs::read(d.path().join("a").join(f)).unwrap();
        let b = std::fs::read(d.path().join("b").join(f)).unwrap();
        if f == "manifest.json" {
            let (ma, mb): (Value, Value) = (serde_json::from_slice(&a).unwrap(), serde_json::from_slice(&b).unwrap());
            assert_eq!(ma["config_hash"], mb["config_hash"]);
            assert_eq!(ma["seed"], 11);
        } else {
            assert_eq!(a, b, "{f} differs");
        }
    }
    assert_eq!(code(&run(&["simulate", "--config", &c, "--seed", "12", "--out", "c"], d.path())), 0);
    assert_ne!(
        std::fs::read(d.path().join("a/trajectory.csv")).unwrap(),
        std::fs::read(d.path().join("c/trajectory.csv")).unwrap()
    );
}

#[test]
fn system_file_round_trips_and_toy_file_is_feasible() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(&run(&["synth", "--system", "decoupled_scalar", "--out", "a"], d.path())), 0);
    let first = std::fs::read(d.path().join("a/system.json")).unwrap();
    let c = write(
        d.path(),
        "c.json",
        r#"{"system":"a/system.json","hyperparams":{"q":[[[0.1]]],"h":[1.0]},
            "simulation":{"initial_history":[[[0.1]]]}}"#,
    );
    let o = run(&["synth", "--config", &c, "--out", "b"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(first, std::fs::read(d.path().join("b/system.json")).unwrap());
}

#[test]
fn unknown_system_and_missing_gains_are_invalid_input() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(&run(&["synth", "--system", "nope", "--out", "o"], d.path())), 3);
    assert_eq!(code(&run(&["verify", "--system", "decoupled_scalar", "--out", "o"], d.path())), 3);
    assert_eq!(code(&run(&["frobnicate"], d.path())), 3);
}
