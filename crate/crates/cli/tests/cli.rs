//! End-to-end runs of the `leakmarket` binary on the bundled configurations.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str], cfg: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leakmarket"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].to_string()).collect()
}

fn floats(path: &Path, name: &str) -> Vec<f64> {
    column(path, name).iter().filter(|s| !s.is_empty()).map(|s| s.parse().unwrap()).collect()
}

fn write_variant(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(config("uniform.json")).unwrap()).unwrap();
    edit(&mut v);
    let path = dir.join("variant.json");
    std::fs::write(&path, v.to_string()).unwrap();
    path
}

#[test]
fn solve_writes_stamped_artifacts() {
    let dir = TempDir::new().unwrap();
    let cfg = config("uniform.json");
    let out = run(&["solve", "--seed", "11"], &cfg, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let hash = hex::encode(Sha256::digest(std::fs::read(&cfg).unwrap()));

    let mech = json(&dir.path().join("mechanism.json"));
    assert_eq!(mech["provenance"]["config_sha256"], hash.as_str());
    assert_eq!(mech["provenance"]["seed"], 11);
    assert_eq!(mech["structure"], "FtD");
    let budget = &mech["budget"];
    assert!(budget["identity_gap"].as_f64().unwrap() < 1e-6);

    for file in ["allocation.csv", "payment.csv"] {
        let p = dir.path().join(file);
        assert!(column(&p, "config_sha256").iter().all(|h| *h == hash));
        assert!(column(&p, "seed").iter().all(|s| s == "11"));
    }
    let alloc = dir.path().join("allocation.csv");
    let groups = column(&alloc, "group");
    let a = floats(&alloc, "allocation");
    for w in 1..a.len() {
        if groups[w] == groups[w - 1] {
            assert!(a[w] <= a[w - 1], "allocation rises at row {w}");
        }
    }
}

#[test]
fn offset_config_solves_to_sd() {
    let dir = TempDir::new().unwrap();
    let out = run(&["solve"], &config("offset.json"), dir.path());
    assert!(out.status.success());
    assert_eq!(json(&dir.path().join("mechanism.json"))["structure"], "SD");
}

#[test]
fn audit_passes_on_solver_output() {
    for name in ["uniform.json", "offset.json"] {
        let dir = TempDir::new().unwrap();
        let out = run(&["audit"], &config(name), dir.path());
        assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        let audit = json(&dir.path().join("audit.json"));
        assert_eq!(audit["passed"], true);
        assert_eq!(audit["truthfulness"]["violations"].as_array().unwrap().len(), 0);
    }
}

#[test]
fn oracle_error_shrinks_with_k() {
    let dir = TempDir::new().unwrap();
    let out = run(&["oracle"], &config("uniform.json"), dir.path());
    assert!(out.status.success());
    let p = dir.path().join("oracle.csv");
    assert_eq!(column(&p, "k"), ["10", "100", "1000"]);
    let err = floats(&p, "sup_error");
    assert!(err[0] > err[1] && err[1] > err[2], "{err:?}");
}

#[test]
fn simulate_is_reproducible() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let cfg = config("uniform.json");
    for d in [&a, &b] {
        let out = run(&["simulate", "--seed", "5", "--reps", "200"], &cfg, d.path());
        assert!(out.status.success());
    }
    let read = |d: &TempDir| std::fs::read_to_string(d.path().join("simulation.json")).unwrap();
    assert_eq!(read(&a), read(&b));
    let sim = json(&a.path().join("simulation.json"));
    assert_eq!(sim["simulation"]["replications"], 200);
    assert_eq!(sim["provenance"]["seed"], 5);
}

#[test]
fn budget_sweep_t_star_non_increasing() {
    let dir = TempDir::new().unwrap();
    let args = ["sweep", "--axis", "budget", "--from", "9", "--to", "10.5", "--steps", "10"];
    let out = run(&args, &config("uniform.json"), dir.path());
    assert_eq!(out.status.code(), Some(0));
    let t = floats(&dir.path().join("sweep.csv"), "t_star");
    assert!(t.len() >= 2);
    assert!(t.windows(2).all(|w| w[1] <= w[0]), "{t:?}");
}

#[test]
fn alpha_sweep_participant_payment_non_increasing() {
    let dir = TempDir::new().unwrap();
    let args = ["sweep", "--axis", "alpha_intra", "--from", "0.1", "--to", "0.5", "--steps", "9"];
    let out = run(&args, &config("offset.json"), dir.path());
    assert_eq!(out.status.code(), Some(0));
    let pay = floats(&dir.path().join("sweep.csv"), "frozen_individual_payment");
    assert_eq!(pay.len(), 9);
    assert!(pay.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-10)), "{pay:?}");
    let checks = json(&dir.path().join("sweep.json"));
    assert_eq!(checks["passed"], true);
}

#[test]
fn theta_sweep_emits_payment_column() {
    let dir = TempDir::new().unwrap();
    let args = ["sweep", "--axis", "theta_i", "--from", "0.3", "--to", "1.0", "--steps", "8"];
    let out = run(&args, &config("uniform.json"), dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(column(&dir.path().join("sweep.csv"), "group_payment").len(), 8);
}

#[test]
fn full_participation_check_runs() {
    let dir = TempDir::new().unwrap();
    let out = run(&["check-full-participation", "--steps", "3"], &config("uniform.json"), dir.path());
    assert_eq!(out.status.code(), Some(0));
    let rep = json(&dir.path().join("full_participation.json"));
    assert_eq!(rep["points"].as_array().unwrap().len(), 9);
}

#[test]
fn config_errors_exit_2_with_field_path() {
    let dir = TempDir::new().unwrap();
    let bad_mass = write_variant(dir.path(), |v| v["groups"][0]["mass"] = 0.5.into());
    let out = run(&["solve"], &bad_mass, dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("groups[].mass"));

    let no_gamma = write_variant(dir.path(), |v| {
        v.as_object_mut().unwrap().remove("gamma");
    });
    let out = run(&["solve"], &no_gamma, dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma"));

    let out = run(&["solve"], &dir.path().join("missing.json"), dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_arguments_are_validated() {
    let dir = TempDir::new().unwrap();
    let cfg = config("uniform.json");
    assert_eq!(run(&["sweep", "--from", "1", "--to", "2", "--steps", "3"], &cfg, dir.path()).status.code(), Some(2));
    let one_step = ["sweep", "--axis", "budget", "--from", "9", "--to", "10", "--steps", "1"];
    assert_eq!(run(&one_step, &cfg, dir.path()).status.code(), Some(2));
    let empty = ["sweep", "--axis", "budget", "--from", "9", "--to", "9", "--steps", "4"];
    assert_eq!(run(&empty, &cfg, dir.path()).status.code(), Some(2));
    let axis = ["sweep", "--axis", "kappa", "--from", "0", "--to", "1", "--steps", "4"];
    assert_eq!(run(&axis, &cfg, dir.path()).status.code(), Some(2));
}

#[test]
fn infeasible_budget_exits_3() {
    let dir = TempDir::new().unwrap();
    let cfg = write_variant(dir.path(), |v| v["budget"] = 0.01.into());
    let out = run(&["solve"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible budget"));
}

#[test]
fn irregular_costs_exit_5() {
    let dir = TempDir::new().unwrap();
    let cfg = write_variant(dir.path(), |v| {
        v["groups"][0]["cost_dist"] = serde_json::json!({
            "family": "beta-on-interval", "c_min": 0.5, "c_max": 1.5, "params": { "a": 0.5, "b": 0.5 }
        });
    });
    let out = run(&["solve"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("regularity"));
}
