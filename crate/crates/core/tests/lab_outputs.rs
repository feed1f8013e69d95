use biasnet::lab::{
    build_schedule, counterfactual_scenario, fig6_scan, builtin_graph_b, builtin_graph_c, paper_scenario, run_scenario,
    write_outputs, DecompositionRule, Phase, ScenarioConfig,
};
use biasnet::GraphSchedule;

fn quick(mut cfg: ScenarioConfig, horizon: f64) -> ScenarioConfig {
    cfg.horizon = horizon;
    cfg.analyses.certificate = false;
    cfg.analyses.cie_windows = vec![2.0];
    cfg
}

#[test]
fn toml_round_trip() {
    for cfg in [paper_scenario(), counterfactual_scenario()] {
        let text = cfg.to_toml();
        let back = ScenarioConfig::from_toml(&text).unwrap();
        assert_eq!(back.to_toml(), text);
        assert_eq!(
            back.build_schedule().unwrap().segments(),
            cfg.build_schedule().unwrap().segments()
        );
    }
}

#[test]
fn missing_fields_take_defaults() {
    let mut text = paper_scenario().to_toml();
    // Drop the analyses and thresholds tables entirely.
    if let Some(pos) = text.find("[analyses]") {
        text.truncate(pos);
    }
    let cfg = ScenarioConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.analyses.tbar, 8.0);
}

#[test]
fn csv_outputs_are_reproducible() {
    let cfg = quick(paper_scenario(), 5.0);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_outputs(&run_scenario(&cfg).unwrap(), a.path()).unwrap();
    write_outputs(&run_scenario(&cfg).unwrap(), b.path()).unwrap();
    for name in ["trajectory.csv", "metrics.csv", "fig6.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{name}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["name"], cfg.name);
    let header = std::fs::read_to_string(a.path().join("trajectory.csv")).unwrap();
    assert!(header.lines().next().unwrap().starts_with('t'));
}

#[test]
fn violated_threshold_fails_the_run() {
    let mut cfg = quick(paper_scenario(), 2.0);
    cfg.thresholds.max_position_error = Some(1e-12);
    let run = run_scenario(&cfg).unwrap();
    assert!(!run.report.passed);
    assert!(run.report.checks.iter().any(|c| !c.passed && c.name.contains("position")));
}

#[test]
fn unbiased_network_reaches_consensus() {
    let mut cfg = quick(paper_scenario(), 40.0);
    cfg.bias.iter_mut().for_each(|b| *b = 0.0);
    cfg.thresholds = Default::default();
    let run = run_scenario(&cfg).unwrap();
    assert!(run.report.final_position_error < 0.05, "{}", run.report.final_position_error);
}

#[test]
fn decompositions_preserve_the_union() {
    let parent = builtin_graph_b();
    let rot = 4.0;
    for rule in [DecompositionRule::SingleEdge, DecompositionRule::LeaveOneOut, DecompositionRule::Whole] {
        let sched = build_schedule(&parent, 16.0, rot, rule).unwrap();
        for k in 0..4 {
            let t = k as f64 * rot;
            let u = sched.union_graph(t, t + rot).unwrap();
            let scale = u.matrix().amax() / parent.matrix().amax();
            assert!((u.matrix() / scale - parent.matrix()).amax() < 1e-12, "{rule:?}");
        }
        assert!(sched.is_jointly_connected(1e-3, rot, None).unwrap());
    }
}

#[test]
fn rotation_must_divide_phase() {
    let mut cfg = paper_scenario();
    cfg.schedule.rotation = 3.0;
    assert!(cfg.build_schedule().is_err());
    let mut cfg = paper_scenario();
    cfg.schedule.phases = vec![];
    assert!(cfg.build_schedule().is_err());
}

#[test]
fn edgeless_parent_is_rejected() {
    let mut cfg = paper_scenario();
    cfg.schedule.phases = vec![Phase { parent: biasnet::WeightedAdjacency::empty(5), duration: None }];
    assert!(cfg.build_schedule().is_err());
}

#[test]
fn determinant_scan_separates_the_phases() {
    let sched = GraphSchedule::constant(builtin_graph_b(), 8.0)
        .unwrap()
        .concat(GraphSchedule::constant(builtin_graph_c(), 8.0).unwrap())
        .unwrap();
    let pts = fig6_scan(&sched, 4.0, 0.5).unwrap();
    for p in &pts {
        if p.t + 4.0 <= 8.0 {
            assert!(p.det > 1.0);
        } else if p.t >= 8.0 {
            assert!(p.det.abs() < 1e-9);
        }
    }
}
