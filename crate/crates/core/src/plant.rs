//! Double-integrator network, biased relative-position sensing and the
//! closed-loop integrator.

use std::io::Write;
use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controller::{
    evaluate_agent, filtered_regressor, parameter_len, ControllerDerivative, ControllerState, GainSet, MeasurementSet,
    NeighborMeasurement, ParameterEstimate,
};
use crate::error::{Error, Result};
use crate::graph::{laplacian_matrices, GraphSchedule, WeightedAdjacency};
use crate::linalg::{eig_extremes, min_eigenvalue};
use crate::ode::{compensated_add, lawson_rk4_parts, rk4_increment};

/// State norm above which integration is aborted.
pub const BLOW_UP_THRESHOLD: f64 = 1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrigFn {
    Cos2,
    Sin2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub coef: f64,
    #[serde(rename = "fn")]
    pub func: TrigFn,
    pub freq: f64,
}

/// Time-varying positive gain `k(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GainProfile {
    Constant { value: f64 },
    /// `c0 + Σ coef · {cos², sin²}(freq · t)`.
    TrigSum { c0: f64, terms: Vec<TrigTerm> },
}

impl GainProfile {
    /// `1 + 0.5 cos²(t) + 0.5 sin²(2t)`.
    pub fn multi_frequency() -> Self {
        GainProfile::TrigSum {
            c0: 1.0,
            terms: vec![
                TrigTerm { coef: 0.5, func: TrigFn::Cos2, freq: 1.0 },
                TrigTerm { coef: 0.5, func: TrigFn::Sin2, freq: 2.0 },
            ],
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            GainProfile::Constant { value } => *value,
            GainProfile::TrigSum { c0, terms } => {
                c0 + terms
                    .iter()
                    .map(|term| {
                        let x = term.freq * t;
                        let s = match term.func {
                            TrigFn::Cos2 => x.cos(),
                            TrigFn::Sin2 => x.sin(),
                        };
                        term.coef * s * s
                    })
                    .sum::<f64>()
            }
        }
    }

    /// Exact `(inf, sup)` over `t`, since each `cos²`/`sin²` ranges over `[0, 1]`.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            GainProfile::Constant { value } => (*value, *value),
            GainProfile::TrigSum { c0, terms } => terms.iter().fold((*c0, *c0), |(lo, hi), t| {
                (lo + t.coef.min(0.0), hi + t.coef.max(0.0))
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
}

/// Stacked constant sensor biases, one `R^m` block per agent.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasVector {
    b: DVector<f64>,
    m: usize,
}

impl BiasVector {
    pub fn new(b: DVector<f64>, m: usize) -> Result<Self> {
        if m == 0 || b.len() % m != 0 {
            return Err(Error::ShapeMismatch(format!(
                "bias length {} is not a multiple of m = {m}",
                b.len()
            )));
        }
        Ok(Self { b, m })
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            b: DVector::zeros(n * m),
            m,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn block(&self, i: usize) -> DVector<f64> {
        self.b.rows(i * self.m, self.m).into_owned()
    }

    pub fn stacked(&self) -> &DVector<f64> {
        &self.b
    }

    /// True parameter vector `θ = (1, 1, b)`.
    pub fn theta(&self) -> DVector<f64> {
        ParameterEstimate::from_parts(1.0, 1.0, self.b.as_slice(), self.m)
            .expect("bias length is a multiple of m")
            .as_vector()
            .clone()
    }
}

/// Positions, velocities and controller states of the whole network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub t: f64,
    pub agents: Vec<AgentState>,
    pub controllers: Vec<ControllerState>,
}

fn controller_block_len(n: usize, m: usize) -> usize {
    let p = parameter_len(n, m);
    p + m * p + 2 * m + p * p + p
}

impl NetworkState {
    pub fn n(&self) -> usize {
        self.agents.len()
    }

    pub fn m(&self) -> usize {
        self.agents.first().map_or(0, |a| a.q.len())
    }

    pub fn positions(&self) -> DVector<f64> {
        stack(self.agents.iter().map(|a| &a.q))
    }

    pub fn velocities(&self) -> DVector<f64> {
        stack(self.agents.iter().map(|a| &a.qdot))
    }

    pub fn flat_len(&self) -> usize {
        let (n, m) = (self.n(), self.m());
        2 * n * m + n * controller_block_len(n, m)
    }

    /// Flat layout: all `q`, all `q̇`, then per agent
    /// `θ̂, Y_F2, h, w_F, Y_IF, w_IF` (matrices column-major).
    pub fn to_flat(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for a in &self.agents {
            out.extend_from_slice(a.q.as_slice());
        }
        for a in &self.agents {
            out.extend_from_slice(a.qdot.as_slice());
        }
        for c in &self.controllers {
            out.extend_from_slice(c.theta_hat.as_vector().as_slice());
            out.extend_from_slice(c.yf2.as_slice());
            out.extend_from_slice(c.h.as_slice());
            out.extend_from_slice(c.w_f.as_slice());
            out.extend_from_slice(c.y_if.as_slice());
            out.extend_from_slice(c.w_if.as_slice());
        }
        DVector::from_vec(out)
    }

    /// Overwrites every dynamic field from a flat vector produced by
    /// [`NetworkState::to_flat`].
    pub fn load_flat(&mut self, t: f64, y: &[f64]) {
        self.t = t;
        let mut pos = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&y[pos..pos + dst.len()]);
            pos += dst.len();
        };
        for a in &mut self.agents {
            take(a.q.as_mut_slice());
        }
        for a in &mut self.agents {
            take(a.qdot.as_mut_slice());
        }
        for c in &mut self.controllers {
            take(c.theta_hat.as_vector_mut().as_mut_slice());
            take(c.yf2.as_mut_slice());
            take(c.h.as_mut_slice());
            take(c.w_f.as_mut_slice());
            take(c.y_if.as_mut_slice());
            take(c.w_if.as_mut_slice());
        }
    }
}

fn stack<'a>(blocks: impl Iterator<Item = &'a DVector<f64>>) -> DVector<f64> {
    let v: Vec<f64> = blocks.flat_map(|b| b.iter().copied()).collect();
    DVector::from_vec(v)
}

/// Time-stepping scheme.
///
/// The estimate dynamics carry `-(μ_F Y_FᵀY_F + μ_IF Y_IF) θ̂`. `Y_IF` is a
/// running integral that grows without bound, so the problem becomes stiff
/// as time goes on. `LawsonRk4` treats that term exactly through a matrix
/// exponential frozen at the start of each step; `Rk4` is the classical
/// explicit scheme and eventually loses stability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Rk4,
    #[default]
    LawsonRk4,
}

/// Closed-loop simulation settings.
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub n: usize,
    pub m: usize,
    pub gains: GainSet,
    pub gain_profile: GainProfile,
    pub schedule: GraphSchedule,
    pub bias: BiasVector,
    pub q0: DVector<f64>,
    pub qdot0: DVector<f64>,
    pub theta0: Vec<DVector<f64>>,
    pub dt: f64,
    pub horizon: f64,
    pub integrator: Integrator,
    /// Integration steps between log records.
    pub log_stride: usize,
    /// Log records between controller-state snapshots.
    pub snapshot_stride: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n, self.m);
        if n == 0 || m == 0 {
            return Err(Error::InvalidConfig("need n >= 1 and m >= 1".into()));
        }
        self.gains.validate()?;
        let (k_lo, k_hi) = self.gain_profile.bounds();
        if !(k_lo > 0.0 && k_hi.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "k(t) must stay in (0, k_M]; its range is [{k_lo}, {k_hi}]"
            )));
        }
        if self.schedule.n() != n {
            return Err(Error::InvalidConfig(format!(
                "schedule has {} nodes, config has n = {n}",
                self.schedule.n()
            )));
        }
        if self.schedule.horizon() < self.horizon - 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "schedule ends at {} before the horizon {}",
                self.schedule.horizon(),
                self.horizon
            )));
        }
        for (name, len) in [
            ("bias", self.bias.stacked().len()),
            ("q0", self.q0.len()),
            ("qdot0", self.qdot0.len()),
        ] {
            if len != n * m {
                return Err(Error::InvalidConfig(format!(
                    "{name} has length {len}, expected {}",
                    n * m
                )));
            }
        }
        if self.theta0.len() != n
            || self.theta0.iter().any(|t| t.len() != parameter_len(n, m))
        {
            return Err(Error::InvalidConfig(format!(
                "theta0 must hold {n} vectors of length {}",
                parameter_len(n, m)
            )));
        }
        if !(self.dt > 0.0 && self.horizon > 0.0) {
            return Err(Error::InvalidConfig("dt and horizon must be positive".into()));
        }
        if self.log_stride == 0 || self.snapshot_stride == 0 {
            return Err(Error::InvalidConfig("strides must be at least 1".into()));
        }
        Ok(())
    }

    pub fn initial_state(&self) -> NetworkState {
        let m = self.m;
        let block = |v: &DVector<f64>, i: usize| v.rows(i * m, m).into_owned();
        let agents = (0..self.n)
            .map(|i| AgentState {
                q: block(&self.q0, i),
                qdot: block(&self.qdot0, i),
            })
            .collect();
        let controllers = (0..self.n)
            .map(|i| {
                let est = ParameterEstimate::new(self.theta0[i].clone(), self.n, m)
                    .expect("validated theta0");
                ControllerState::initial(est, block(&self.qdot0, i))
            })
            .collect();
        NetworkState {
            t: 0.0,
            agents,
            controllers,
        }
    }

    pub fn true_theta(&self) -> DVector<f64> {
        self.bias.theta()
    }
}

/// Local information of every agent under the active graph. Agents see their
/// own velocity, and over each active edge the biased relative positions in
/// both directions, the relative velocity and the neighbour's estimate.
pub fn measurements(state: &NetworkState, bias: &BiasVector, adj: &WeightedAdjacency) -> Vec<MeasurementSet> {
    let q_matrix = laplacian_matrices(adj).signless;
    (0..state.n())
        .map(|i| {
            let ai = &state.agents[i];
            let neighbors = adj
                .neighbors(i)
                .map(|(j, w)| {
                    let aj = &state.agents[j];
                    NeighborMeasurement {
                        index: j,
                        weight: w,
                        z_ij: &ai.q - &aj.q + bias.block(i),
                        z_ji: &aj.q - &ai.q + bias.block(j),
                        rel_vel: &ai.qdot - &aj.qdot,
                        theta_hat: state.controllers[j].theta_hat.as_vector().clone(),
                    }
                })
                .collect();
            MeasurementSet {
                agent: i,
                own_vel: ai.qdot.clone(),
                neighbors,
                q_row: q_matrix.row(i).transpose(),
            }
        })
        .collect()
}

/// Time derivative of the full closed loop, plus the intermediate signals.
#[derive(Clone, Debug)]
pub struct NetworkDerivative {
    /// `d/dt q`, i.e. the velocities.
    pub velocity: DVector<f64>,
    /// `d/dt q̇ = u`.
    pub acceleration: DVector<f64>,
    pub controllers: Vec<ControllerDerivative>,
    pub w: Vec<DVector<f64>>,
    pub y_f: Vec<DMatrix<f64>>,
}

impl NetworkDerivative {
    pub fn to_flat(&self) -> DVector<f64> {
        let mut out: Vec<f64> = Vec::new();
        out.extend_from_slice(self.velocity.as_slice());
        out.extend_from_slice(self.acceleration.as_slice());
        for c in &self.controllers {
            out.extend_from_slice(c.theta_hat.as_slice());
            out.extend_from_slice(c.yf2.as_slice());
            out.extend_from_slice(c.h.as_slice());
            out.extend_from_slice(c.w_f.as_slice());
            out.extend_from_slice(c.y_if.as_slice());
            out.extend_from_slice(c.w_if.as_slice());
        }
        DVector::from_vec(out)
    }
}

/// Closed-loop derivative under an explicitly given graph.
pub fn derivative_with(
    state: &NetworkState,
    adj: &WeightedAdjacency,
    cfg: &SimConfig,
) -> Result<NetworkDerivative> {
    let t = state.t;
    let k_t = cfg.gain_profile.eval(t);
    let meas = measurements(state, &cfg.bias, adj);
    let mut controllers = Vec::with_capacity(state.n());
    let mut w = Vec::with_capacity(state.n());
    let mut y_f = Vec::with_capacity(state.n());
    let mut acceleration = Vec::with_capacity(state.n() * state.m());
    for (ms, cs) in meas.iter().zip(&state.controllers) {
        let eval = evaluate_agent(ms, cs, &cfg.gains, k_t, t);
        acceleration.extend(eval.control.u.iter().copied());
        w.push(eval.control.w);
        y_f.push(eval.y_f);
        controllers.push(eval.derivative);
    }
    let acceleration = DVector::from_vec(acceleration);
    if acceleration.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { what: "control input", t });
    }
    if controllers
        .iter()
        .any(|c| c.theta_hat.iter().any(|x| !x.is_finite()))
    {
        return Err(Error::NonFinite { what: "estimate derivative", t });
    }
    Ok(NetworkDerivative {
        velocity: state.velocities(),
        acceleration,
        controllers,
        w,
        y_f,
    })
}

/// Closed-loop derivative with the graph active at `state.t`.
pub fn closed_loop_derivative(state: &NetworkState, cfg: &SimConfig) -> Result<NetworkDerivative> {
    derivative_with(state, cfg.schedule.adjacency_at(state.t), cfg)
}

/// One logged instant.
#[derive(Clone, Debug)]
pub struct LogRecord {
    pub t: f64,
    pub k: f64,
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    /// Control input, equal to the acceleration.
    pub u: DVector<f64>,
    pub theta_hat: Vec<DVector<f64>>,
    pub y_f: Vec<DMatrix<f64>>,
    pub w_f: Vec<DVector<f64>>,
    /// `‖b̃‖` over all estimator/target pairs.
    pub btilde_norm: f64,
    /// Stacked `‖θ̃‖`.
    pub theta_tilde_norm: f64,
    /// `θ̃·θ̃̇`, half the rate of `‖θ̃‖²`.
    pub theta_tilde_rate: f64,
    pub yif_min_eig: Vec<f64>,
    /// `λ_min(Y_IF(t_k) - Y_IF(t_{k-1}))` against the previous record.
    pub yif_increment_min_eig: Vec<f64>,
    /// `‖Y_IF θ - w_IF‖ / (1 + ‖Y_IF‖)`.
    pub fact1_residual: Vec<f64>,
}

/// Controller integrals at a coarser stride than the records.
#[derive(Clone, Debug)]
pub struct GramianSnapshot {
    pub t: f64,
    pub y_if: Vec<DMatrix<f64>>,
    pub w_if: Vec<DVector<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrajectoryLog {
    pub n: usize,
    pub m: usize,
    pub records: Vec<LogRecord>,
    pub snapshots: Vec<GramianSnapshot>,
    pub final_state: NetworkState,
    pub steps: usize,
}

impl TrajectoryLog {
    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    pub fn initial_theta_tilde_norm(&self) -> f64 {
        self.records[0].theta_tilde_norm
    }

    /// Exports one row per record with columns `t`, `q_i_d`, `qd_i_d`,
    /// `bhat_k_i_d`, `btilde_norm`, `u_i_d` (1-based indices).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let (n, m) = (self.n, self.m);
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        for i in 1..=n {
            for d in 1..=m {
                header.push(format!("q_{i}_{d}"));
            }
        }
        for i in 1..=n {
            for d in 1..=m {
                header.push(format!("qd_{i}_{d}"));
            }
        }
        for k in 1..=n {
            for i in 1..=n {
                for d in 1..=m {
                    header.push(format!("bhat_{k}_{i}_{d}"));
                }
            }
        }
        header.push("btilde_norm".into());
        for i in 1..=n {
            for d in 1..=m {
                header.push(format!("u_{i}_{d}"));
            }
        }
        wtr.write_record(&header)?;
        for r in &self.records {
            let mut row = Vec::with_capacity(header.len());
            row.push(r.t.to_string());
            row.extend(r.q.iter().map(f64::to_string));
            row.extend(r.qdot.iter().map(f64::to_string));
            for th in &r.theta_hat {
                row.extend(th.rows(2, n * m).iter().map(f64::to_string));
            }
            row.push(r.btilde_norm.to_string());
            row.extend(r.u.iter().map(f64::to_string));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

struct Recorder<'a> {
    cfg: &'a SimConfig,
    theta: DVector<f64>,
    prev_y_if: Vec<DMatrix<f64>>,
}

impl<'a> Recorder<'a> {
    fn record(&mut self, state: &NetworkState) -> Result<LogRecord> {
        let cfg = self.cfg;
        let deriv = closed_loop_derivative(state, cfg)?;
        let (n, m) = (cfg.n, cfg.m);
        let mut btilde_sq = 0.0;
        let mut theta_tilde_sq = 0.0;
        let mut yif_min_eig = Vec::with_capacity(n);
        let mut yif_increment_min_eig = Vec::with_capacity(n);
        let mut fact1_residual = Vec::with_capacity(n);
        for (i, c) in state.controllers.iter().enumerate() {
            let err = &self.theta - c.theta_hat.as_vector();
            theta_tilde_sq += err.norm_squared();
            btilde_sq += err.rows(2, n * m).norm_squared();
            let (lo, hi) = eig_extremes(&c.y_if);
            yif_min_eig.push(lo);
            yif_increment_min_eig.push(min_eigenvalue(&(&c.y_if - &self.prev_y_if[i])));
            let residual = (&c.y_if * &self.theta - &c.w_if).norm();
            fact1_residual.push(residual / (1.0 + hi.max(0.0)));
            self.prev_y_if[i].copy_from(&c.y_if);
        }
        Ok(LogRecord {
            t: state.t,
            k: cfg.gain_profile.eval(state.t),
            q: state.positions(),
            qdot: state.velocities(),
            u: deriv.acceleration,
            theta_hat: state
                .controllers
                .iter()
                .map(|c| c.theta_hat.as_vector().clone())
                .collect(),
            y_f: deriv.y_f,
            w_f: state.controllers.iter().map(|c| c.w_f.clone()).collect(),
            theta_tilde_rate: state
                .controllers
                .iter()
                .zip(&deriv.controllers)
                .map(|(c, d)| -(&self.theta - c.theta_hat.as_vector()).dot(&d.theta_hat))
                .sum(),
            btilde_norm: btilde_sq.sqrt(),
            theta_tilde_norm: theta_tilde_sq.sqrt(),
            yif_min_eig,
            yif_increment_min_eig,
            fact1_residual,
        })
    }
}

/// Stiff affine part of the closed loop, frozen at the start of a step.
///
/// Per agent, `θ̂` relaxes through `-A θ̂ + g` with
/// `A = μ_F Y_FᵀY_F + μ_IF Y_IF` (PSD) and `g = μ_F Y_Fᵀw_F + μ_IF w_IF`, and
/// the same fast rate leaks into `q̇_i` and `w_F` through the `(λ/2)ḃ̂_i^i`
/// term of `w_i`. Both couplings are included so the operator is block
/// triangular and its exponential is exact: `θ̂ ↦ E θ̂`,
/// `q̇_i ↦ q̇_i + (λ/2)[(E - I)θ̂]_i`. The step runs in coordinates shifted by
/// `c = A⁺g` on the stiff eigen-directions; without the shift the large,
/// nearly constant forcing `g` is integrated by quadrature and the scheme
/// settles at the wrong fixed point once `h‖A‖` is large.
struct StiffPart {
    blocks: Vec<StiffBlock>,
    half_lambda: f64,
    m: usize,
    /// Flat shift, nonzero only on estimate blocks.
    shift: DVector<f64>,
}

struct StiffBlock {
    theta: usize,
    qdot: usize,
    w_f: usize,
    /// Position of `b̂_i^i` inside `θ̂`.
    own: usize,
    a: DMatrix<f64>,
    half_exp: DMatrix<f64>,
}

impl StiffPart {
    /// Eigen-directions with `λh` below this are left unshifted; they are not
    /// stiff and any shift is exact anyway.
    const SHIFT_THRESHOLD: f64 = 1e-2;

    fn freeze(state: &NetworkState, gains: &GainSet, h: f64) -> Self {
        let (n, m) = (state.n(), state.m());
        let p = parameter_len(n, m);
        let block = controller_block_len(n, m);
        let mut shift = DVector::zeros(state.flat_len());
        let blocks = state
            .controllers
            .iter()
            .zip(&state.agents)
            .enumerate()
            .map(|(i, (c, agent))| {
                let y_f = filtered_regressor(c, &agent.qdot, state.t, gains.beta);
                let a = crate::linalg::symmetrize(&c.y_if) * gains.mu_if + y_f.tr_mul(&y_f) * gains.mu_f;
                let g = &c.w_if * gains.mu_if + y_f.tr_mul(&c.w_f) * gains.mu_f;
                let eig = crate::linalg::symmetric_eigen(&a);
                let decay = eig.eigenvalues.map(|l| (-l * 0.5 * h).exp());
                let v = &eig.eigenvectors;
                let theta = 2 * n * m + i * block;
                let mut centre = shift.rows_mut(theta, p);
                for (k, &l) in eig.eigenvalues.iter().enumerate() {
                    if l * h > Self::SHIFT_THRESHOLD {
                        let dir = v.column(k);
                        centre.axpy(dir.dot(&g) / l, &dir, 1.0);
                    }
                }
                StiffBlock {
                    theta,
                    qdot: n * m + i * m,
                    w_f: theta + p + m * p + m,
                    own: 2 + i * m,
                    half_exp: v * DMatrix::from_diagonal(&decay) * v.transpose(),
                    a,
                }
            })
            .collect();
        Self {
            blocks,
            half_lambda: 0.5 * gains.lambda,
            m,
            shift,
        }
    }

    fn apply_a(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(y.len());
        for b in &self.blocks {
            let p = b.a.nrows();
            let g = &b.a * y.rows(b.theta, p);
            let leak = g.rows(b.own, self.m) * self.half_lambda;
            out.rows_mut(b.qdot, self.m).copy_from(&leak);
            out.rows_mut(b.w_f, self.m).copy_from(&leak);
            out.rows_mut(b.theta, p).copy_from(&g);
        }
        out
    }

    fn apply_half_exp(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = y.clone();
        for b in &self.blocks {
            let p = b.a.nrows();
            let theta = y.rows(b.theta, p);
            let e = &b.half_exp * theta;
            let shift = (e.rows(b.own, self.m) - theta.rows(b.own, self.m)) * self.half_lambda;
            out.rows_mut(b.qdot, self.m).add_assign(&shift);
            out.rows_mut(b.w_f, self.m).add_assign(&shift);
            out.rows_mut(b.theta, p).copy_from(&e);
        }
        out
    }
}

fn snapshot(state: &NetworkState) -> GramianSnapshot {
    GramianSnapshot {
        t: state.t,
        y_if: state.controllers.iter().map(|c| c.y_if.clone()).collect(),
        w_if: state.controllers.iter().map(|c| c.w_if.clone()).collect(),
    }
}

/// One fixed step of the closed loop under `adj` from `(t, y)`, with `y` in
/// the flat layout of [`NetworkState::to_flat`]. `scratch` supplies the
/// non-integrated fields (initial velocities) and is overwritten.
pub fn advance(
    cfg: &SimConfig,
    adj: &WeightedAdjacency,
    scratch: &mut NetworkState,
    t: f64,
    y: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>> {
    let (base, delta) = advance_parts(cfg, adj, scratch, t, y, h)?;
    Ok(base + delta)
}

/// [`advance`] split as `(base, delta)`. `base` equals `y` exactly on every
/// component outside the stiff estimate block, so summing `delta` with
/// compensation keeps the running integrals `Y_IF`, `w_IF` free of drift.
fn advance_parts(
    cfg: &SimConfig,
    adj: &WeightedAdjacency,
    scratch: &mut NetworkState,
    t: f64,
    y: &DVector<f64>,
    h: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    match cfg.integrator {
        Integrator::Rk4 => {
            let mut rhs = |t: f64, yv: &DVector<f64>| -> Result<DVector<f64>> {
                scratch.load_flat(t, yv.as_slice());
                Ok(derivative_with(scratch, adj, cfg)?.to_flat())
            };
            Ok((y.clone(), rk4_increment(&mut rhs, t, y, h)?))
        }
        Integrator::LawsonRk4 => {
            scratch.load_flat(t, y.as_slice());
            let stiff = StiffPart::freeze(scratch, &cfg.gains, h);
            let shift = &stiff.shift;
            let mut rhs = |t: f64, z: &DVector<f64>| -> Result<DVector<f64>> {
                scratch.load_flat(t, (z + shift).as_slice());
                Ok(derivative_with(scratch, adj, cfg)?.to_flat())
            };
            let (base, delta) = lawson_rk4_parts(
                &mut rhs,
                &|v: &DVector<f64>| stiff.apply_a(v),
                &|v: &DVector<f64>| stiff.apply_half_exp(v),
                t,
                &(y - shift),
                h,
            )?;
            Ok((base + shift, delta))
        }
    }
}

/// Fixed-step integration of the closed loop. Each schedule segment is split into
/// equal steps no longer than `dt`, so every switch instant is a step
/// boundary and no step straddles a discontinuity of the right-hand side.
pub fn integrate(cfg: &SimConfig) -> Result<TrajectoryLog> {
    cfg.validate()?;
    let schedule = cfg.schedule.truncated(cfg.horizon)?;
    let mut state = cfg.initial_state();
    let mut scratch = state.clone();
    let mut y = state.to_flat();
    let mut carry = DVector::zeros(y.len());
    let p = parameter_len(cfg.n, cfg.m);
    let mut recorder = Recorder {
        cfg,
        theta: cfg.true_theta(),
        prev_y_if: vec![DMatrix::zeros(p, p); cfg.n],
    };
    let mut records = vec![recorder.record(&state)?];
    let mut snapshots = vec![snapshot(&state)];
    let mut steps = 0usize;

    let segments = schedule.segments();
    for (si, seg) in segments.iter().enumerate() {
        let len = seg.dwell();
        let count = ((len / cfg.dt) - 1e-9).ceil().max(1.0) as usize;
        let h = len / count as f64;
        for s in 0..count {
            let t = seg.start + s as f64 * h;
            let (base, delta) = advance_parts(cfg, &seg.adjacency, &mut scratch, t, &y, h)?;
            y = base;
            compensated_add(&mut y, &mut carry, &delta);
            steps += 1;
            let t_next = if s + 1 == count {
                seg.end
            } else {
                seg.start + (s + 1) as f64 * h
            };
            let norm = y.norm();
            if !norm.is_finite() || norm > BLOW_UP_THRESHOLD {
                return Err(Error::BlowUp { t: t_next, norm });
            }
            let last = si + 1 == segments.len() && s + 1 == count;
            if steps % cfg.log_stride == 0 || last {
                state.load_flat(t_next, y.as_slice());
                records.push(recorder.record(&state)?);
                if (records.len() - 1) % cfg.snapshot_stride == 0 || last {
                    snapshots.push(snapshot(&state));
                }
            }
        }
    }
    state.load_flat(schedule.horizon(), y.as_slice());
    Ok(TrajectoryLog {
        n: cfg.n,
        m: cfg.m,
        records,
        snapshots,
        final_state: state,
        steps,
    })
}

/// Consensus error signals along a log.
#[derive(Clone, Debug, Serialize)]
pub struct ConsensusMetrics {
    pub times: Vec<f64>,
    pub max_pairwise_pos: Vec<f64>,
    pub vel_norm: Vec<f64>,
    pub bias_err_norm: Vec<f64>,
}

pub fn max_pairwise_distance(q: &DVector<f64>, m: usize) -> f64 {
    let n = q.len() / m;
    let mut best: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = (q.rows(i * m, m) - q.rows(j * m, m)).norm();
            best = best.max(d);
        }
    }
    best
}

pub fn consensus_metrics(log: &TrajectoryLog) -> ConsensusMetrics {
    ConsensusMetrics {
        times: log.times(),
        max_pairwise_pos: log
            .records
            .iter()
            .map(|r| max_pairwise_distance(&r.q, log.m))
            .collect(),
        vel_norm: log.records.iter().map(|r| r.qdot.norm()).collect(),
        bias_err_norm: log.records.iter().map(|r| r.btilde_norm).collect(),
    }
}
