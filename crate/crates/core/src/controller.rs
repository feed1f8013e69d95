//! Distributed adaptive bias-compensating controller.
//!
//! Every function here consumes a [`MeasurementSet`] and the agent's own
//! [`ControllerState`]. Neither carries absolute positions of other agents or
//! the true sensor biases, so the control law is implementable from local
//! information only.
//!
//! The parameter vector is `θ = (1, 1, b)` with `b` the stacked biases; each
//! agent keeps its own estimate `θ̂ⁱ = (pⁱ, lⁱ, b̂ⁱ)`.

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Controller gains. All must be strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainSet {
    /// Consensus gain on `s_i - s_j`.
    pub sigma: f64,
    /// Slope of the composite error `s_i = q̇_i + λ(q_i + b̃_i^i/2)`.
    pub lambda: f64,
    /// Pole of the first-order regressor filter.
    pub beta: f64,
    pub mu_f: f64,
    pub mu_if: f64,
}

impl GainSet {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("sigma", self.sigma),
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("mu_f", self.mu_f),
            ("mu_if", self.mu_if),
        ];
        for (name, v) in all {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("gain {name} = {v} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Length of the parameter vector for `n` agents in `R^m`.
pub fn parameter_len(n: usize, m: usize) -> usize {
    m * n + 2
}

/// Splits the bias part of a parameter vector into per-agent blocks.
pub fn extract_bias(theta: &[f64], n: usize, m: usize) -> Result<Vec<DVector<f64>>> {
    if theta.len() != parameter_len(n, m) {
        return Err(Error::ShapeMismatch(format!(
            "parameter vector has length {}, expected {}",
            theta.len(),
            parameter_len(n, m)
        )));
    }
    Ok((0..n)
        .map(|j| DVector::from_row_slice(&theta[2 + j * m..2 + (j + 1) * m]))
        .collect())
}

/// Agent estimate `θ̂ = (p, l, b̂_1, …, b̂_n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterEstimate {
    theta: DVector<f64>,
    n: usize,
    m: usize,
}

impl ParameterEstimate {
    pub fn new(theta: DVector<f64>, n: usize, m: usize) -> Result<Self> {
        if theta.len() != parameter_len(n, m) {
            return Err(Error::ShapeMismatch(format!(
                "parameter vector has length {}, expected {}",
                theta.len(),
                parameter_len(n, m)
            )));
        }
        Ok(Self { theta, n, m })
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            theta: DVector::zeros(parameter_len(n, m)),
            n,
            m,
        }
    }

    /// Assembles `(p, l, b)` from a stacked bias vector of length `mn`.
    pub fn from_parts(p: f64, l: f64, bias: &[f64], m: usize) -> Result<Self> {
        if m == 0 || bias.len() % m != 0 {
            return Err(Error::ShapeMismatch(format!(
                "bias length {} is not a multiple of m = {m}",
                bias.len()
            )));
        }
        let n = bias.len() / m;
        let mut theta = DVector::zeros(parameter_len(n, m));
        theta[0] = p;
        theta[1] = l;
        theta.rows_mut(2, bias.len()).copy_from_slice(bias);
        Ok(Self { theta, n, m })
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn as_vector_mut(&mut self) -> &mut DVector<f64> {
        &mut self.theta
    }

    pub fn p(&self) -> f64 {
        self.theta[0]
    }

    pub fn l(&self) -> f64 {
        self.theta[1]
    }

    /// This agent's estimate of agent `j`'s bias.
    pub fn bias(&self, j: usize) -> DVectorView<'_, f64> {
        self.theta.rows(2 + j * self.m, self.m)
    }

    pub fn biases(&self) -> Vec<DVector<f64>> {
        extract_bias(self.theta.as_slice(), self.n, self.m).expect("length checked on construction")
    }
}

/// Per-agent adaptive and filter state.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState {
    pub theta_hat: ParameterEstimate,
    /// Filtered measurable regressor part, `m × (mn+2)`.
    pub yf2: DMatrix<f64>,
    /// Low-pass of the own velocity, used to reconstruct the filtered
    /// acceleration column without measuring acceleration.
    pub h: DVector<f64>,
    pub w_f: DVector<f64>,
    /// Running integral of `Y_Fᵀ Y_F`.
    pub y_if: DMatrix<f64>,
    /// Running integral of `Y_Fᵀ w_F`.
    pub w_if: DVector<f64>,
    /// Own velocity at `t = 0`.
    pub qdot0: DVector<f64>,
}

impl ControllerState {
    /// Filters start at zero; only `θ̂(0)` and `q̇_i(0)` are free.
    pub fn initial(theta_hat: ParameterEstimate, qdot0: DVector<f64>) -> Self {
        let (n, m) = (theta_hat.n, theta_hat.m);
        let p = parameter_len(n, m);
        Self {
            theta_hat,
            yf2: DMatrix::zeros(m, p),
            h: DVector::zeros(m),
            w_f: DVector::zeros(m),
            y_if: DMatrix::zeros(p, p),
            w_if: DVector::zeros(p),
            qdot0,
        }
    }

    pub fn n(&self) -> usize {
        self.theta_hat.n
    }

    pub fn m(&self) -> usize {
        self.theta_hat.m
    }
}

/// What agent `i` learns from neighbour `j` over an active edge.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborMeasurement {
    pub index: usize,
    pub weight: f64,
    /// `z_ij = q_i - q_j + b_i`, measured by agent `i`.
    pub z_ij: DVector<f64>,
    /// `z_ji = q_j - q_i + b_j`, measured by `j` and exchanged.
    pub z_ji: DVector<f64>,
    /// `q̇_i - q̇_j`.
    pub rel_vel: DVector<f64>,
    /// Neighbour's full estimate `θ̂ʲ` (it carries `b̂ʲ`).
    pub theta_hat: DVector<f64>,
}

impl NeighborMeasurement {
    /// Neighbour's estimate of bias `k`.
    pub fn bias_estimate(&self, k: usize, m: usize) -> DVectorView<'_, f64> {
        self.theta_hat.rows(2 + k * m, m)
    }
}

/// Everything agent `i` may use at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet {
    pub agent: usize,
    pub own_vel: DVector<f64>,
    pub neighbors: Vec<NeighborMeasurement>,
    /// Row `i` of the active signless Laplacian.
    pub q_row: DVector<f64>,
}

impl MeasurementSet {
    pub fn m(&self) -> usize {
        self.own_vel.len()
    }

    pub fn n(&self) -> usize {
        self.q_row.len()
    }
}

/// Measurable regressor part `[0, k q̇_i, (k/2)[Q_i1 I_m, …, Q_in I_m]]`.
pub fn regressor_y2(qdot_i: &DVector<f64>, q_row: &DVector<f64>, k_t: f64) -> DMatrix<f64> {
    let m = qdot_i.len();
    let n = q_row.len();
    let mut y = DMatrix::zeros(m, parameter_len(n, m));
    y.column_mut(1).copy_from(&(qdot_i * k_t));
    for j in 0..n {
        let c = 0.5 * k_t * q_row[j];
        if c != 0.0 {
            for d in 0..m {
                y[(d, 2 + j * m + d)] = c;
            }
        }
    }
    y
}

/// Full regressor `Y_i = [q̈_i, k q̇_i, (k/2)[Q_ij I_m]]`. Not available to
/// the controller (it needs acceleration); used by analyses.
pub fn regressor_full(
    qddot_i: &DVector<f64>,
    qdot_i: &DVector<f64>,
    q_row: &DVector<f64>,
    k_t: f64,
) -> DMatrix<f64> {
    let mut y = regressor_y2(qdot_i, q_row, k_t);
    y.column_mut(0).copy_from(qddot_i);
    y
}

/// `Z_i = [0, 0, -(k/2)[Q_ij I_m]]`.
pub fn regressor_z(m: usize, q_row: &DVector<f64>, k_t: f64) -> DMatrix<f64> {
    let mut z = regressor_y2(&DVector::zeros(m), q_row, k_t);
    z.neg_mut();
    z
}

/// `Y_F = Y_F1 + Y_F2` with the acceleration column reconstructed as
/// `q̇_i(t) - e^{-βt} q̇_i(0) - h_i(t)`.
pub fn filtered_regressor(cs: &ControllerState, qdot_i: &DVector<f64>, t: f64, beta: f64) -> DMatrix<f64> {
    let mut yf = cs.yf2.clone();
    let first = qdot_i - &cs.qdot0 * (-beta * t).exp() - &cs.h;
    let mut column = yf.column_mut(0);
    column += &first;
    yf
}

/// Estimate update
/// `θ̂̇ⁱ = μ_F Y_Fᵀ(w_F - Y_F θ̂ⁱ) + μ_IF(w_IF - Y_IF θ̂ⁱ) - Σ_j a_ij(θ̂ⁱ - θ̂ʲ)`.
pub fn adaptation_derivative(
    meas: &MeasurementSet,
    cs: &ControllerState,
    y_f: &DMatrix<f64>,
    gains: &GainSet,
) -> DVector<f64> {
    let theta = cs.theta_hat.as_vector();
    let residual_f = &cs.w_f - y_f * theta;
    let mut dot = y_f.tr_mul(&residual_f) * gains.mu_f;
    dot += (&cs.w_if - &cs.y_if * theta) * gains.mu_if;
    for nb in &meas.neighbors {
        dot -= (theta - &nb.theta_hat) * nb.weight;
    }
    dot
}

/// Auxiliary and total control of agent `i`.
#[derive(Clone, Debug)]
pub struct ControlOutput {
    pub w: DVector<f64>,
    pub u: DVector<f64>,
}

/// `w_i` and `u_i` from measurements only.
///
/// `theta_dot` is this agent's own adaptation derivative, which supplies
/// `ḃ̂_i^i` (the bias is constant, so `ḃ̃_i^i = -ḃ̂_i^i`). The bias terms of
/// `u_i` enter through `z_ij + z_ji = b_i + b_j`.
pub fn control_w_u(
    meas: &MeasurementSet,
    cs: &ControllerState,
    theta_dot: &DVector<f64>,
    gains: &GainSet,
    k_t: f64,
) -> ControlOutput {
    let m = meas.m();
    let i = meas.agent;
    let own = cs.theta_hat.bias(i);
    let own_rate = theta_dot.rows(2 + i * m, m);
    let qdot = &meas.own_vel;

    let mut w = qdot * (k_t - gains.lambda) + own_rate * (0.5 * gains.lambda);
    let mut z_sum = DVector::zeros(m);
    for nb in &meas.neighbors {
        let a = nb.weight;
        let nb_own = nb.bias_estimate(nb.index, m);
        // s_i - s_j reconstructed from measured quantities.
        let ds = &nb.rel_vel + (&nb.z_ij - &nb.z_ji - (own - nb_own)) * (0.5 * gains.lambda);
        let mine_of_j = cs.theta_hat.bias(nb.index);
        w += own * (k_t * a);
        w -= ds * (gains.sigma * a);
        w -= (own - mine_of_j) * (0.5 * k_t * a);
        z_sum += (&nb.z_ij + &nb.z_ji) * a;
    }
    let u = (-qdot - z_sum * 0.5) * k_t + &w;
    ControlOutput { w, u }
}

/// Time derivatives of one agent's controller state.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerDerivative {
    pub theta_hat: DVector<f64>,
    pub yf2: DMatrix<f64>,
    pub h: DVector<f64>,
    pub w_f: DVector<f64>,
    pub y_if: DMatrix<f64>,
    pub w_if: DVector<f64>,
}

/// Filter dynamics: `Ẏ_F2 = -βY_F2 + Y_2`, `ḣ = βq̇ - βh`, `ẇ_F = -βw_F + w`,
/// `Ẏ_IF = Y_FᵀY_F`, `ẇ_IF = Y_Fᵀw_F`. The estimate derivative is filled in
/// from `theta_dot`.
pub fn filter_derivatives(
    meas: &MeasurementSet,
    cs: &ControllerState,
    w: &DVector<f64>,
    y_f: &DMatrix<f64>,
    theta_dot: DVector<f64>,
    k_t: f64,
    beta: f64,
) -> ControllerDerivative {
    let qdot = &meas.own_vel;
    let y2 = regressor_y2(qdot, &meas.q_row, k_t);
    ControllerDerivative {
        theta_hat: theta_dot,
        yf2: y2 - &cs.yf2 * beta,
        h: (qdot - &cs.h) * beta,
        w_f: w - &cs.w_f * beta,
        y_if: y_f.tr_mul(y_f),
        w_if: y_f.tr_mul(&cs.w_f),
    }
}

/// One full controller evaluation for agent `i` in the required order:
/// filtered regressor, adaptation derivative, then `w_i`/`u_i`, then filters.
#[derive(Clone, Debug)]
pub struct AgentEvaluation {
    pub y_f: DMatrix<f64>,
    pub control: ControlOutput,
    pub derivative: ControllerDerivative,
}

pub fn evaluate_agent(
    meas: &MeasurementSet,
    cs: &ControllerState,
    gains: &GainSet,
    k_t: f64,
    t: f64,
) -> AgentEvaluation {
    let y_f = filtered_regressor(cs, &meas.own_vel, t, gains.beta);
    let theta_dot = adaptation_derivative(meas, cs, &y_f, gains);
    let control = control_w_u(meas, cs, &theta_dot, gains, k_t);
    let derivative = filter_derivatives(meas, cs, &control.w, &y_f, theta_dot, k_t, gains.beta);
    AgentEvaluation {
        y_f,
        control,
        derivative,
    }
}
