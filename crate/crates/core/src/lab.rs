//! Config-driven experiment runner: built-in scenarios, schedule
//! construction, analyses and CSV/JSON output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::certify::{lyapunov_trace, theorem_constants, CertificateReport, LyapunovTrace};
use crate::controller::{parameter_len, GainSet};
use crate::error::{Error, Result};
use crate::excitation::{check_cie, ExcitationReport, MatrixSignal};
use crate::graph::{laplacian_matrices, GraphSchedule, Segment, WeightedAdjacency};
use crate::plant::{
    consensus_metrics, integrate, max_pairwise_distance, BiasVector, GainProfile, Integrator, SimConfig,
    TrajectoryLog,
};

/// How a parent graph is split into the sub-graphs that are cycled through
/// within each rotation window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecompositionRule {
    /// One edge at a time, each for `rotation / |E|`.
    SingleEdge,
    /// `|E|` sub-graphs, the k-th omitting edge k.
    LeaveOneOut,
    /// The parent itself for the whole rotation.
    #[default]
    Whole,
}

/// One parent graph held for `duration` seconds. A missing duration on the
/// last phase extends it to the horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub parent: WeightedAdjacency,
    pub duration: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub phases: Vec<Phase>,
    pub rotation: f64,
    #[serde(default)]
    pub rule: DecompositionRule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Analyses {
    /// C-IE of the filtered regressors on `[0, T̄]` for each listed `T̄`.
    pub excitation: bool,
    pub cie_windows: Vec<f64>,
    pub fig6: bool,
    pub fig6_window: f64,
    pub fig6_step: f64,
    pub certificate: bool,
    pub certificate_window: f64,
    /// End of the excitation window after which the certificate applies.
    pub tbar: f64,
    /// Start of the exponential-decay fit of `‖b̃‖`.
    pub fit_from: f64,
}

impl Default for Analyses {
    fn default() -> Self {
        Self {
            excitation: true,
            cie_windows: vec![2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 100.0],
            fig6: true,
            fig6_window: 4.0,
            fig6_step: 0.1,
            certificate: false,
            certificate_window: 8.0,
            tbar: 8.0,
            fit_from: 8.0,
        }
    }
}

/// Pass/fail thresholds. A `None` entry is not checked.
///
/// A config without a `[thresholds]` table gets [`Thresholds::default`]; inside
/// an explicit table, a missing key disables that check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    #[serde(default)]
    pub max_position_error: Option<f64>,
    #[serde(default)]
    pub max_velocity: Option<f64>,
    /// Final `‖b̃‖ / ‖b̃(0)‖` must not exceed this.
    #[serde(default)]
    pub max_bias_fraction: Option<f64>,
    /// `‖b̃(t)‖ / ‖b̃(0)‖` must stay at or above this for all `t`.
    #[serde(default)]
    pub min_bias_fraction: Option<f64>,
    #[serde(default)]
    pub min_fit_r2: Option<f64>,
    #[serde(default)]
    pub fact1: Option<f64>,
    #[serde(default)]
    pub fact2: Option<f64>,
    #[serde(default)]
    pub theta_tilde_growth: Option<f64>,
    /// Expected C-IE verdict at every tested window.
    #[serde(default)]
    pub expect_cie: Option<bool>,
    /// Largest admissible C-IE level when failure is expected.
    #[serde(default = "default_cie_fail_level")]
    pub cie_fail_level: f64,
    #[serde(default)]
    pub lyapunov_increase: Option<f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            max_position_error: Some(1e-2),
            max_velocity: Some(1e-2),
            max_bias_fraction: Some(1e-2),
            min_bias_fraction: None,
            min_fit_r2: Some(0.9),
            fact1: Some(1e-6),
            fact2: Some(1e-9),
            theta_tilde_growth: Some(1e-6),
            expect_cie: None,
            cie_fail_level: default_cie_fail_level(),
            lyapunov_increase: Some(crate::certify::V_INCREASE_TOL),
        }
    }
}

fn default_cie_fail_level() -> f64 {
    1e-8
}

fn default_log_stride() -> usize {
    10
}

fn default_snapshot_stride() -> usize {
    50
}

/// Full description of one experiment, loadable from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub gains: GainSet,
    pub gain_profile: GainProfile,
    /// Stacked biases, `n·m` entries.
    pub bias: Vec<f64>,
    pub q0: Vec<f64>,
    pub qdot0: Vec<f64>,
    /// Per-agent initial estimates; zero when absent.
    #[serde(default)]
    pub theta0: Option<Vec<Vec<f64>>>,
    pub dt: f64,
    pub horizon: f64,
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default = "default_log_stride")]
    pub log_stride: usize,
    #[serde(default = "default_snapshot_stride")]
    pub snapshot_stride: usize,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub analyses: Analyses,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub outputs: Option<PathBuf>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config is always serializable")
    }

    pub fn build_schedule(&self) -> Result<GraphSchedule> {
        let spec = &self.schedule;
        if spec.phases.is_empty() {
            return Err(Error::InvalidConfig("schedule needs at least one phase".into()));
        }
        let mut out: Option<GraphSchedule> = None;
        let mut elapsed = 0.0;
        for (k, phase) in spec.phases.iter().enumerate() {
            let last = k + 1 == spec.phases.len();
            let remaining = self.horizon - elapsed;
            if remaining <= 1e-9 {
                break;
            }
            let duration = match phase.duration {
                Some(d) => {
                    let cycles = d / spec.rotation;
                    if (cycles - cycles.round()).abs() > 1e-9 {
                        return Err(Error::InvalidConfig(format!(
                            "rotation {} does not divide phase {k} duration {d}",
                            spec.rotation
                        )));
                    }
                    if last { d.max(remaining) } else { d.min(remaining) }
                }
                None if last => remaining,
                None => {
                    return Err(Error::InvalidConfig(format!("phase {k} needs a duration")));
                }
            };
            let piece = build_schedule(&phase.parent, duration, spec.rotation, spec.rule)?;
            out = Some(match out {
                None => piece,
                Some(s) => s.concat(piece)?,
            });
            elapsed += duration;
        }
        let sched = out.expect("at least one phase is built");
        merge_equal_segments(&sched)?.truncated(self.horizon)
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let (n, m) = (self.n, self.m);
        let p = parameter_len(n, m);
        let theta0 = match &self.theta0 {
            None => vec![DVector::zeros(p); n],
            Some(v) => v.iter().map(|t| DVector::from_vec(t.clone())).collect(),
        };
        let cfg = SimConfig {
            n,
            m,
            gains: self.gains,
            gain_profile: self.gain_profile.clone(),
            schedule: self.build_schedule()?,
            bias: BiasVector::new(DVector::from_vec(self.bias.clone()), m)?,
            q0: DVector::from_vec(self.q0.clone()),
            qdot0: DVector::from_vec(self.qdot0.clone()),
            theta0,
            dt: self.dt,
            horizon: self.horizon,
            integrator: self.integrator,
            log_stride: self.log_stride,
            snapshot_stride: self.snapshot_stride,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `parent` into sub-graphs and cycles through them, each rotation
/// window of length `rotation` visiting every sub-graph once for an equal
/// share. The result covers `[0, phase]`; a final partial rotation is cut.
pub fn build_schedule(
    parent: &WeightedAdjacency,
    phase: f64,
    rotation: f64,
    rule: DecompositionRule,
) -> Result<GraphSchedule> {
    if !(rotation > 0.0 && phase > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "phase {phase} and rotation {rotation} must be positive"
        )));
    }
    let edges: Vec<(usize, usize, f64)> = parent.edges().collect();
    if edges.is_empty() {
        return Err(Error::InvalidSchedule("parent graph has no edges".into()));
    }
    let n = parent.n();
    let groups: Vec<WeightedAdjacency> = match rule {
        DecompositionRule::Whole => vec![parent.clone()],
        DecompositionRule::SingleEdge => edges
            .iter()
            .map(|&e| WeightedAdjacency::from_edges(n, &[e]))
            .collect::<Result<_>>()?,
        DecompositionRule::LeaveOneOut if edges.len() == 1 => vec![parent.clone()],
        DecompositionRule::LeaveOneOut => (0..edges.len())
            .map(|k| {
                let rest: Vec<_> = edges
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != k)
                    .map(|(_, &e)| e)
                    .collect();
                WeightedAdjacency::from_edges(n, &rest)
            })
            .collect::<Result<_>>()?,
    };
    let share = rotation / groups.len() as f64;
    let cycles = (phase / rotation - 1e-9).ceil().max(1.0) as usize;
    let mut segments = Vec::with_capacity(cycles * groups.len());
    'outer: for c in 0..cycles {
        for (k, g) in groups.iter().enumerate() {
            let start = c as f64 * rotation + k as f64 * share;
            if start >= phase - 1e-9 {
                break 'outer;
            }
            let end = (start + share).min(phase);
            segments.push(Segment { start, end, adjacency: g.clone() });
        }
    }
    if let Some(last) = segments.last_mut() {
        last.end = phase;
    }
    merge_equal_segments(&GraphSchedule::new(segments, phase)?)
}

fn merge_equal_segments(sched: &GraphSchedule) -> Result<GraphSchedule> {
    let mut out: Vec<Segment> = Vec::with_capacity(sched.segments().len());
    for seg in sched.segments() {
        match out.last_mut() {
            Some(prev) if prev.adjacency == seg.adjacency => prev.end = seg.end,
            _ => out.push(seg.clone()),
        }
    }
    GraphSchedule::new(out, sched.horizon())
}

/// Parent graph of the initial phase.
pub fn builtin_graph_b() -> WeightedAdjacency {
    WeightedAdjacency::from_rows(&[
        vec![0., 1., 1., 0., 1.],
        vec![1., 0., 1., 0., 1.],
        vec![1., 1., 0., 1., 0.],
        vec![0., 0., 1., 0., 0.],
        vec![1., 1., 0., 0., 0.],
    ])
    .expect("valid adjacency")
}

/// Parent graph of the second phase; bipartite.
pub fn builtin_graph_c() -> WeightedAdjacency {
    WeightedAdjacency::from_rows(&[
        vec![0., 1., 0., 0., 1.],
        vec![1., 0., 1., 0., 0.],
        vec![0., 1., 0., 1., 0.],
        vec![0., 0., 1., 0., 0.],
        vec![1., 0., 0., 0., 0.],
    ])
    .expect("valid adjacency")
}

/// Five quadrotor-like agents in `R^3`: 8 s on the non-bipartite graph,
/// then the bipartite one until the horizon.
pub fn paper_scenario() -> ScenarioConfig {
    use std::f64::consts::PI;
    let (n, m) = (5, 3);
    let mut q0 = Vec::with_capacity(n * m);
    let mut qdot0 = Vec::with_capacity(n * m);
    let mut bias = Vec::with_capacity(n * m);
    for i in 1..=n {
        let i = i as f64;
        q0.extend([i * PI / 7.0, i * PI / 5.0, i * PI / 3.0]);
        qdot0.extend([0.1 * i - 0.7, -0.1 * i + 0.6, 0.1 * i + 0.7]);
        bias.extend([i * PI / 12.0; 3]);
    }
    ScenarioConfig {
        name: "paper".into(),
        n,
        m,
        gains: GainSet {
            sigma: 0.2,
            lambda: 0.5,
            beta: 0.5,
            mu_f: 0.02,
            mu_if: 15.0,
        },
        gain_profile: GainProfile::multi_frequency(),
        bias,
        q0,
        qdot0,
        theta0: None,
        dt: 1e-3,
        horizon: 100.0,
        integrator: Integrator::LawsonRk4,
        log_stride: 10,
        snapshot_stride: 50,
        schedule: ScheduleSpec {
            phases: vec![
                Phase { parent: builtin_graph_b(), duration: Some(8.0) },
                Phase { parent: builtin_graph_c(), duration: None },
            ],
            rotation: 4.0,
            rule: DecompositionRule::Whole,
        },
        analyses: Analyses {
            certificate: true,
            ..Analyses::default()
        },
        thresholds: Thresholds {
            expect_cie: None,
            ..Thresholds::default()
        },
        outputs: None,
    }
}

/// The built-in scenario with the bipartite graph from the start. Bias
/// estimation is expected to stall at a non-zero error.
pub fn counterfactual_scenario() -> ScenarioConfig {
    let mut cfg = paper_scenario();
    cfg.name = "counterfactual".into();
    cfg.schedule.phases = vec![Phase { parent: builtin_graph_c(), duration: None }];
    cfg.analyses.certificate = false;
    cfg.thresholds = Thresholds {
        max_position_error: None,
        max_velocity: None,
        max_bias_fraction: None,
        min_bias_fraction: Some(0.05),
        min_fit_r2: None,
        expect_cie: Some(false),
        lyapunov_increase: None,
        ..Thresholds::default()
    };
    cfg
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Fig6Point {
    pub t: f64,
    pub det: f64,
}

/// `det ∫_t^{t+T} Q(τ) dτ` for window starts `0, step, 2·step, …` up to
/// `horizon - T`.
pub fn fig6_scan(sched: &GraphSchedule, window: f64, step: f64) -> Result<Vec<Fig6Point>> {
    if !(window > 0.0 && window <= sched.horizon() + 1e-9 && step > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "window {window} must lie in (0, {}] and step {step} must be positive",
            sched.horizon()
        )));
    }
    let last = (sched.horizon() - window).max(0.0);
    let count = (last / step + 1e-9).floor() as usize;
    (0..=count)
        .map(|k| {
            let t = k as f64 * step;
            let union = sched.union_graph(t, (t + window).min(sched.horizon()))?;
            Ok(Fig6Point { t, det: laplacian_matrices(&union).signless.determinant() })
        })
        .collect()
}

/// Determinant range over the scan windows lying fully inside one phase.
#[derive(Clone, Debug, Serialize)]
pub struct PhaseDeterminants {
    pub phase: usize,
    pub start: f64,
    pub end: f64,
    pub windows: usize,
    pub min_det: f64,
    pub max_det: f64,
    pub max_abs_det: f64,
}

pub fn phase_determinants(points: &[Fig6Point], window: f64, bounds: &[(f64, f64)]) -> Vec<PhaseDeterminants> {
    bounds
        .iter()
        .enumerate()
        .map(|(phase, &(start, end))| {
            let inside: Vec<f64> = points
                .iter()
                .filter(|p| p.t >= start - 1e-9 && p.t + window <= end + 1e-9)
                .map(|p| p.det)
                .collect();
            PhaseDeterminants {
                phase,
                start,
                end,
                windows: inside.len(),
                min_det: inside.iter().copied().fold(f64::INFINITY, f64::min),
                max_det: inside.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                max_abs_det: inside.iter().map(|d| d.abs()).fold(0.0, f64::max),
            }
        })
        .collect()
}

/// Least-squares line through `(t, ln y)`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ExpFit {
    pub from: f64,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn log_linear_fit(times: &[f64], values: &[f64], from: f64) -> Option<ExpFit> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|&(&t, &v)| t >= from && v > 0.0)
        .map(|(&t, &v)| (t, v.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let k = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Some(ExpFit { from, slope, intercept: my - slope * mt, r2 })
}

#[derive(Clone, Debug, Serialize)]
pub struct CieEntry {
    pub tbar: f64,
    pub report: ExcitationReport,
}

/// C-IE of the filtered regressors `{Y_F_i}` over `[0, T̄]`.
pub fn filtered_regressor_cie(log: &TrajectoryLog, tbar: f64) -> Result<ExcitationReport> {
    let times = log.times();
    let sigs = (0..log.n)
        .map(|i| MatrixSignal::new(times.clone(), log.records.iter().map(|r| r.y_f[i].clone()).collect()))
        .collect::<Result<Vec<_>>>()?;
    check_cie(&sigs, tbar, 0.0)
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), passed: value <= threshold, value, threshold }
    }

    fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), passed: value >= threshold, value, threshold }
    }
}

/// Lyapunov trace without the per-instant series.
#[derive(Clone, Debug, Serialize)]
pub struct LyapunovSummary {
    pub evaluated: usize,
    pub s_min_eig: f64,
    pub s_max_eig: f64,
    pub s_bounds_ok: bool,
    pub max_relative_increase: f64,
    pub first_increase_at: Option<f64>,
    pub non_increasing: bool,
}

impl From<&LyapunovTrace> for LyapunovSummary {
    fn from(t: &LyapunovTrace) -> Self {
        Self {
            evaluated: t.values.len(),
            s_min_eig: t.s_min_eig,
            s_max_eig: t.s_max_eig,
            s_bounds_ok: t.s_bounds_ok,
            max_relative_increase: t.max_relative_increase,
            first_increase_at: t.first_increase_at,
            non_increasing: t.non_increasing,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CertificateSummary {
    #[serde(flatten)]
    pub report: CertificateReport,
    pub lyapunov: LyapunovSummary,
}

#[derive(Clone, Debug, Serialize)]
pub struct SummaryReport {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub horizon: f64,
    pub dt: f64,
    pub integrator: Integrator,
    pub rule: DecompositionRule,
    pub steps: usize,
    pub final_time: f64,
    pub final_position_error: f64,
    pub final_velocity_norm: f64,
    pub initial_btilde_norm: f64,
    pub final_btilde_norm: f64,
    pub final_btilde_fraction: f64,
    pub min_btilde_fraction: f64,
    pub initial_theta_tilde_norm: f64,
    pub max_theta_tilde_norm: f64,
    pub fact1_max: f64,
    /// Most negative `λ_min(Y_IF(t₂) - Y_IF(t₁))` over consecutive records.
    pub fact2_min: f64,
    pub exp_fit: Option<ExpFit>,
    pub excitation: Vec<CieEntry>,
    pub fig6: Option<Vec<PhaseDeterminants>>,
    pub certificate: Option<CertificateSummary>,
    pub checks: Vec<Check>,
    pub passed: bool,
    pub runtime_s: f64,
}

/// Everything produced by one scenario run.
pub struct ScenarioRun {
    pub config: ScenarioConfig,
    pub sim: SimConfig,
    pub log: TrajectoryLog,
    pub fig6: Option<Vec<Fig6Point>>,
    pub lyapunov: Option<LyapunovTrace>,
    pub report: SummaryReport,
}

/// Bounds of each phase actually present in the built schedule.
fn phase_bounds(cfg: &ScenarioConfig) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut t = 0.0;
    for (k, ph) in cfg.schedule.phases.iter().enumerate() {
        if t >= cfg.horizon - 1e-9 {
            break;
        }
        let end = match ph.duration {
            Some(d) if k + 1 < cfg.schedule.phases.len() => (t + d).min(cfg.horizon),
            _ => cfg.horizon,
        };
        out.push((t, end));
        t = end;
    }
    out
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioRun> {
    let clock = Instant::now();
    let sim = cfg.sim_config()?;
    let log = integrate(&sim)?;
    let metrics = consensus_metrics(&log);
    let th = &cfg.thresholds;
    let an = &cfg.analyses;
    let mut checks = Vec::new();

    let last = log.records.last().expect("log has records");
    let b0 = metrics.bias_err_norm[0];
    let frac = |v: f64| if b0 > 0.0 { v / b0 } else { 0.0 };
    let final_position_error = max_pairwise_distance(&last.q, log.m);
    let final_velocity_norm = last.qdot.norm();
    let final_btilde_fraction = frac(last.btilde_norm);
    let min_btilde_fraction = metrics
        .bias_err_norm
        .iter()
        .map(|&v| frac(v))
        .fold(f64::INFINITY, f64::min);
    let tt0 = log.initial_theta_tilde_norm();
    let tt_max = log.records.iter().map(|r| r.theta_tilde_norm).fold(0.0, f64::max);
    let fact1_max = log
        .records
        .iter()
        .flat_map(|r| r.fact1_residual.iter().copied())
        .fold(0.0, f64::max);
    let fact2_min = log
        .records
        .iter()
        .skip(1)
        .flat_map(|r| r.yif_increment_min_eig.iter().copied())
        .fold(f64::INFINITY, f64::min);
    let exp_fit = log_linear_fit(&metrics.times, &metrics.bias_err_norm, an.fit_from);

    if let Some(v) = th.max_position_error {
        checks.push(Check::at_most("final_position_error", final_position_error, v));
    }
    if let Some(v) = th.max_velocity {
        checks.push(Check::at_most("final_velocity_norm", final_velocity_norm, v));
    }
    if let Some(v) = th.max_bias_fraction {
        checks.push(Check::at_most("final_btilde_fraction", final_btilde_fraction, v));
    }
    if let Some(v) = th.min_bias_fraction {
        checks.push(Check::at_least("min_btilde_fraction", min_btilde_fraction, v));
    }
    if let Some(v) = th.min_fit_r2 {
        let (slope, r2) = exp_fit.map(|f| (f.slope, f.r2)).unwrap_or((f64::NAN, f64::NAN));
        checks.push(Check { name: "btilde_decay_slope".into(), passed: slope < 0.0, value: slope, threshold: 0.0 });
        checks.push(Check::at_least("btilde_decay_r2", r2, v));
    }
    if let Some(v) = th.fact1 {
        checks.push(Check::at_most("fact1_residual", fact1_max, v));
    }
    if let Some(v) = th.fact2 {
        checks.push(Check::at_least("fact2_increment_min_eig", fact2_min, -v));
    }
    if let Some(v) = th.theta_tilde_growth {
        checks.push(Check::at_most("theta_tilde_growth", tt_max / tt0.max(f64::MIN_POSITIVE), 1.0 + v));
    }

    let mut excitation = Vec::new();
    if an.excitation {
        for &tbar in an.cie_windows.iter().filter(|&&w| w > 0.0 && w <= cfg.horizon + 1e-9) {
            let report = filtered_regressor_cie(&log, tbar.min(cfg.horizon))?;
            if let Some(expect) = th.expect_cie {
                let name = format!("cie_{tbar}");
                checks.push(if expect {
                    Check { name, passed: report.verdict, value: report.level, threshold: report.tolerance }
                } else {
                    Check::at_most(&name, report.level, th.cie_fail_level)
                });
            }
            excitation.push(CieEntry { tbar, report });
        }
    }

    let (fig6, fig6_summary) = if an.fig6 && an.fig6_window <= cfg.horizon {
        let pts = fig6_scan(&sim.schedule, an.fig6_window, an.fig6_step)?;
        let summary = phase_determinants(&pts, an.fig6_window, &phase_bounds(cfg));
        (Some(pts), Some(summary))
    } else {
        (None, None)
    };

    let (certificate, lyapunov) = if an.certificate && an.certificate_window < cfg.horizon {
        let report = theorem_constants(
            &log,
            &sim.schedule,
            an.certificate_window,
            cfg.gains.sigma,
            cfg.gains.mu_if,
            an.tbar,
        )?;
        let trace = lyapunov_trace(
            &log,
            &sim.schedule,
            &sim.bias,
            cfg.gains.lambda,
            &report.constants,
            an.certificate_window,
            an.tbar,
        )?;
        checks.push(Check {
            name: "s_bounds".into(),
            passed: trace.s_bounds_ok,
            value: trace.s_max_eig,
            threshold: 2.0 * report.constants.delta_t,
        });
        checks.push(Check::at_most("factorization_residual", report.factorization_residual, 1e-10));
        if let Some(v) = th.lyapunov_increase {
            checks.push(Check::at_most("lyapunov_max_relative_increase", trace.max_relative_increase, v));
        }
        let summary = CertificateSummary { lyapunov: LyapunovSummary::from(&trace), report };
        (Some(summary), Some(trace))
    } else {
        (None, None)
    };

    let passed = checks.iter().all(|c| c.passed);
    let report = SummaryReport {
        name: cfg.name.clone(),
        n: cfg.n,
        m: cfg.m,
        horizon: cfg.horizon,
        dt: cfg.dt,
        integrator: cfg.integrator,
        rule: cfg.schedule.rule,
        steps: log.steps,
        final_time: last.t,
        final_position_error,
        final_velocity_norm,
        initial_btilde_norm: b0,
        final_btilde_norm: last.btilde_norm,
        final_btilde_fraction,
        min_btilde_fraction,
        initial_theta_tilde_norm: tt0,
        max_theta_tilde_norm: tt_max,
        fact1_max,
        fact2_min,
        exp_fit,
        excitation,
        fig6: fig6_summary,
        certificate,
        checks,
        passed,
        runtime_s: clock.elapsed().as_secs_f64(),
    };
    Ok(ScenarioRun { config: cfg.clone(), sim, log, fig6, lyapunov, report })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Writes `trajectory.csv`, `metrics.csv`, optional `fig6.csv`,
/// `lyapunov.csv` and `m_eig.csv`, plus `summary.json`.
pub fn write_outputs(run: &ScenarioRun, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    run.log.write_csv(create(dir, "trajectory.csv")?)?;

    let metrics = consensus_metrics(&run.log);
    let mut w = csv::Writer::from_writer(create(dir, "metrics.csv")?);
    w.write_record(["t", "max_pairwise_pos", "vel_norm", "btilde_norm", "theta_tilde_norm"])?;
    for (k, r) in run.log.records.iter().enumerate() {
        w.write_record(&[
            r.t.to_string(),
            metrics.max_pairwise_pos[k].to_string(),
            metrics.vel_norm[k].to_string(),
            metrics.bias_err_norm[k].to_string(),
            r.theta_tilde_norm.to_string(),
        ])?;
    }
    w.flush()?;

    if let Some(points) = &run.fig6 {
        let mut w = csv::Writer::from_writer(create(dir, "fig6.csv")?);
        w.write_record(["t", "det"])?;
        for p in points {
            w.write_record(&[p.t.to_string(), p.det.to_string()])?;
        }
        w.flush()?;
    }
    if let Some(trace) = &run.lyapunov {
        let mut w = csv::Writer::from_writer(create(dir, "lyapunov.csv")?);
        w.write_record(["t", "V"])?;
        for (t, v) in trace.times.iter().zip(&trace.values) {
            w.write_record(&[t.to_string(), v.to_string()])?;
        }
        w.flush()?;
    }
    if let Some(cert) = &run.report.certificate {
        let mut w = csv::Writer::from_writer(create(dir, "m_eig.csv")?);
        w.write_record(["t", "m_min_eig"])?;
        for (t, e) in &cert.report.m_trace {
            w.write_record(&[t.to_string(), e.to_string()])?;
        }
        w.flush()?;
    }
    let mut f = create(dir, "summary.json")?;
    serde_json::to_writer_pretty(&mut f, &run.report)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}
