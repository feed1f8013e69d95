use std::path::Path;
use std::process::{Command, Output};

fn biasnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biasnet")).args(args).output().expect("binary runs")
}

fn summary(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("summary JSON on stdout")
}

#[test]
fn short_builtin_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    // Too short for the convergence thresholds, so exit code 1 is expected.
    let res = biasnet(&["paper", "--horizon", "5", "--no-certificate", "--out", out]);
    assert_eq!(res.status.code(), Some(1), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stderr).contains("check failed"));
    let s = summary(&res);
    assert_eq!(s["name"], "paper");
    assert_eq!(s["horizon"], 5.0);
    for f in ["trajectory.csv", "metrics.csv", "fig6.csv", "summary.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        biasnet(&["paper", "--horizon", "3", "--no-certificate", "--out", d.to_str().unwrap()]);
    }
    for f in ["trajectory.csv", "metrics.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn printed_config_runs_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let res = biasnet(&["config", "paper"]);
    assert!(res.status.success());
    let cfg = dir.path().join("paper.toml");
    std::fs::write(&cfg, &res.stdout).unwrap();
    let res = biasnet(&["run", cfg.to_str().unwrap(), "--horizon", "2", "--dt", "0.002", "--no-certificate"]);
    let s = summary(&res);
    assert_eq!(s["dt"], 0.002);
    assert_eq!(s["steps"], 1000);
}

#[test]
fn rule_flag_changes_the_schedule() {
    let res = biasnet(&["paper", "--horizon", "2", "--rule", "single-edge", "--no-certificate"]);
    assert_eq!(summary(&res)["rule"], "single_edge");
}

#[test]
fn determinant_scan_to_stdout_and_file() {
    let res = biasnet(&["fig6", "--window", "4", "--step", "1", "--horizon", "20"]);
    assert!(res.status.success());
    let text = String::from_utf8(res.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,det"));
    let rows: Vec<(f64, f64)> = lines
        .map(|l| {
            let (t, d) = l.split_once(',').unwrap();
            (t.parse().unwrap(), d.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 17);
    assert!(rows[0].1 > 0.0);
    assert!(rows.last().unwrap().1.abs() < 1e-9);

    let dir = tempfile::tempdir().unwrap();
    let res = biasnet(&["fig6", "--horizon", "12", "--out", dir.path().to_str().unwrap()]);
    assert!(res.status.success());
    assert!(dir.path().join("fig6.csv").is_file());
}

#[test]
fn random_scenario_depends_only_on_seed() {
    let run = |seed: &str| summary(&biasnet(&["random", "--seed", seed, "--agents", "4", "--horizon", "4"]));
    let (a, b, c) = (run("7"), run("7"), run("8"));
    assert_eq!(a["final_position_error"], b["final_position_error"]);
    assert_ne!(a["final_position_error"], c["final_position_error"]);
    assert_eq!(a["name"], "random-7");
}

#[test]
fn batch_runs_each_config_into_its_own_directory() {
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for (name, horizon) in [("one", 2.0), ("two", 3.0)] {
        let text = String::from_utf8(biasnet(&["config", "counterfactual"]).stdout).unwrap();
        let text = text
            .replacen("name = \"counterfactual\"", &format!("name = \"{name}\""), 1)
            .replacen("horizon = 100.0", &format!("horizon = {horizon:?}"), 1);
        let p = dir.path().join(format!("{name}.toml"));
        std::fs::write(&p, text).unwrap();
        paths.push(p);
    }
    let out = dir.path().join("out");
    let mut args = vec!["batch"];
    args.extend(paths.iter().map(|p| p.to_str().unwrap()));
    args.extend(["--out", out.to_str().unwrap()]);
    let res = biasnet(&args);
    assert!(res.status.code().is_some());
    for name in ["one", "two"] {
        assert!(Path::new(&out).join(name).join("summary.json").is_file(), "{name}");
    }
}

#[test]
fn errors_exit_with_code_two() {
    let res = biasnet(&["run", "/nonexistent/config.toml"]);
    assert_eq!(res.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "name = 3").unwrap();
    assert_eq!(biasnet(&["run", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(biasnet(&["paper", "--dt", "-1"]).status.code(), Some(2));
}
