//! Post-hoc evaluation of the consensus Lyapunov certificate and of the gain
//! conditions that make it decrease.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{consensus_factor, laplacian_matrices, GraphSchedule, WeightedAdjacency};
use crate::linalg::{eig_extremes, kron_identity, min_eigenvalue};
use crate::plant::{BiasVector, TrajectoryLog};

/// `(I - 1 1ᵀ/n ⊗ I_m) s`: removes the block mean.
pub fn epsilon_transform(s: &DVector<f64>, m: usize) -> DVector<f64> {
    let n = s.len() / m;
    let mut mean = DVector::zeros(m);
    for i in 0..n {
        mean += s.rows(i * m, m);
    }
    mean /= n as f64;
    let mut eps = s.clone();
    for i in 0..n {
        let mut block = eps.rows_mut(i * m, m);
        block -= &mean;
    }
    eps
}

/// `L + 1 1ᵀ/n`, which equals `N Nᵀ` whatever kernel vector builds `N`.
pub fn consensus_gram(adj: &WeightedAdjacency) -> DMatrix<f64> {
    let n = adj.n();
    laplacian_matrices(adj).laplacian.add_scalar(1.0 / n as f64)
}

/// `sup_t ‖N(t) N(t)ᵀ‖` over the schedule.
pub fn sup_gram_norm(sched: &GraphSchedule) -> f64 {
    sched
        .segments()
        .iter()
        .map(|s| eig_extremes(&consensus_gram(&s.adjacency)).1)
        .fold(0.0, f64::max)
}

/// Largest `‖(L + 1 1ᵀ/n) - N Nᵀ‖` over all segments of the schedule.
pub fn factorization_residual(sched: &GraphSchedule) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seg in sched.segments() {
        let nf = consensus_factor(&seg.adjacency)?;
        let r = (consensus_gram(&seg.adjacency) - &nf * nf.transpose()).abs().max();
        worst = worst.max(r);
    }
    Ok(worst)
}

/// Window starts at which the piecewise-linear map `t ↦ ∫_t^{t+T} P` can
/// change slope, clipped to `[0, horizon - T]`. A concave function such as
/// `λ_min` attains its minimum over each linear piece at an endpoint.
fn breakpoint_starts(sched: &GraphSchedule, period: f64) -> Vec<f64> {
    let last = sched.horizon() - period;
    let mut starts = vec![0.0, last];
    for s in sched.switch_times() {
        for c in [s, s - period] {
            if (0.0..=last).contains(&c) {
                starts.push(c);
            }
        }
    }
    starts.sort_by(f64::total_cmp);
    starts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    starts
}

/// Excitation levels of `N`: `(μ₁, μ₂, t at μ₁)` with
/// `μ₁ ≤ λ(∫_t^{t+T} N Nᵀ) ≤ μ₂` over all windows in the horizon.
///
/// `∫ N Nᵀ = L_union + (T/n) 1 1ᵀ` is evaluated exactly at every breakpoint.
pub fn consensus_pe_levels(sched: &GraphSchedule, period: f64) -> Result<(f64, f64, f64)> {
    if !(period > 0.0) || period > sched.horizon() * (1.0 + 1e-12) {
        return Err(Error::InvalidConfig(format!(
            "window {period} must lie in (0, {}]",
            sched.horizon()
        )));
    }
    let n = sched.n() as f64;
    let (mut lo, mut hi, mut at) = (f64::INFINITY, 0.0f64, 0.0);
    for t in breakpoint_starts(sched, period) {
        let t1 = (t + period).min(sched.horizon());
        let union = sched.union_graph(t, t1)?;
        let g = laplacian_matrices(&union).laplacian.add_scalar((t1 - t) / n);
        let (a, b) = eig_extremes(&g);
        if a < lo {
            lo = a;
            at = t;
        }
        hi = hi.max(b);
    }
    Ok((lo, hi, at))
}

/// `S_n(t) = 2δ_T I - (2/T) ∫_t^{t+T} (t + T - τ) P(τ) dτ`, the iterated
/// integral written as a single weighted one. On each constant piece
/// `[a, b]` the weight integrates to `(b - a)(t + T - (a + b)/2)`.
pub fn lyapunov_s_n(sched: &GraphSchedule, t: f64, period: f64, delta_t: f64) -> Result<DMatrix<f64>> {
    let t1 = t + period;
    if t < -1e-12 || t1 > sched.horizon() * (1.0 + 1e-12) + 1e-12 {
        return Err(Error::OutsideHorizon { t0: t, t1, horizon: sched.horizon() });
    }
    let n = sched.n();
    let mut acc = DMatrix::zeros(n, n);
    for (a, b, seg) in sched.pieces(t, t1) {
        acc += consensus_gram(&seg.adjacency) * ((b - a) * (t1 - 0.5 * (a + b)));
    }
    Ok(DMatrix::identity(n, n) * (2.0 * delta_t) - acc * (2.0 / period))
}

/// Quadratic form `V = ½ εᵀ(π I + S) ε + ½ ‖θ̃‖²` with `S = S_n ⊗ I_m`.
#[derive(Clone, Debug)]
pub struct LyapunovForm {
    pub s: DMatrix<f64>,
    pub pi_const: f64,
}

impl LyapunovForm {
    pub fn new(s_n: &DMatrix<f64>, m: usize, pi_const: f64) -> Self {
        Self { s: kron_identity(s_n, m), pi_const }
    }

    pub fn value(&self, eps: &DVector<f64>, theta_tilde_sq: f64) -> f64 {
        0.5 * (self.pi_const * eps.norm_squared() + eps.dot(&(&self.s * eps)) + theta_tilde_sq)
    }
}

/// Ground-truth `s_i = q̇_i + λ(q_i + b̃_i^i / 2)` stacked over agents.
pub fn composite_error(
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    theta_hat: &[DVector<f64>],
    bias: &BiasVector,
    lambda: f64,
) -> DVector<f64> {
    let m = bias.m();
    let mut s = qdot.clone();
    for (i, th) in theta_hat.iter().enumerate() {
        let own = th.rows(2 + i * m, m);
        let btilde = bias.block(i) - own;
        let mut blk = s.rows_mut(i * m, m);
        blk += (q.rows(i * m, m) + btilde * 0.5) * lambda;
    }
    s
}

/// `λ_min(L ⊗ I_p + μ_IF · blockdiag(Y_IF_i))`.
pub fn m_matrix_mineig(l: &DMatrix<f64>, y_if: &[DMatrix<f64>], mu_if: f64) -> Result<f64> {
    let n = l.nrows();
    if y_if.len() != n {
        return Err(Error::ShapeMismatch(format!("{} Y_IF blocks for {n} agents", y_if.len())));
    }
    let p = y_if[0].nrows();
    let mut mm = kron_identity(l, p);
    for (i, y) in y_if.iter().enumerate() {
        if y.shape() != (p, p) {
            return Err(Error::ShapeMismatch(format!("Y_IF block {i} is {:?}", y.shape())));
        }
        let mut blk = mm.view_mut((i * p, i * p), (p, p));
        blk += y * mu_if;
    }
    Ok(min_eigenvalue(&mm))
}

#[derive(Clone, Debug, Serialize)]
pub struct CertificateConstants {
    #[serde(rename = "delta_T")]
    pub delta_t: f64,
    pub pi_const: f64,
    pub mu1: f64,
    /// Upper excitation level of `N`; reported only.
    pub mu2: f64,
    /// `sup ‖N(t)‖`.
    pub n_inf: f64,
    pub gamma_young: f64,
    pub gamma_o: f64,
    pub beta_c: f64,
    #[serde(rename = "z_M")]
    pub z_m: f64,
    /// `min λ_min(M(t))` over snapshots with `t ≥ T̄`.
    pub m_min_eig: f64,
    #[serde(rename = "mu_IF_lower")]
    pub mu_if_lower: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CertificateReport {
    pub window: f64,
    pub tbar: f64,
    pub sigma: f64,
    pub mu_if: f64,
    pub constants: CertificateConstants,
    pub n_persistently_exciting: bool,
    /// `μ_IF` exceeds the bound and `N` is PE.
    pub gain_condition_met: bool,
    pub factorization_residual: f64,
    /// `(t, λ_min(M(t)))` at every snapshot.
    pub m_trace: Vec<(f64, f64)>,
}

/// `max_t (k(t)/2) max_i ‖Q_i·(t)‖`, the norm of the block-diagonal
/// bias regressor along the logged trajectory.
pub fn regressor_bound(log: &TrajectoryLog, sched: &GraphSchedule) -> f64 {
    log.records
        .iter()
        .map(|r| {
            let q = laplacian_matrices(sched.adjacency_at(r.t)).signless;
            let row = (0..q.nrows()).map(|i| q.row(i).norm()).fold(0.0, f64::max);
            0.5 * r.k.abs() * row
        })
        .fold(0.0, f64::max)
}

/// Constants of the convergence proof evaluated on a logged run.
///
/// `γ°` is taken as the geometric mean of its admissible interval
/// `(β_c T/μ₁, 2μ_IF λ_min(M)/β_c)` when that is non-empty, otherwise twice
/// the lower end.
pub fn theorem_constants(
    log: &TrajectoryLog,
    sched: &GraphSchedule,
    period: f64,
    sigma: f64,
    mu_if: f64,
    tbar: f64,
) -> Result<CertificateReport> {
    let (mu1, mu2, _) = consensus_pe_levels(sched, period)?;
    let sup_p = sup_gram_norm(sched);
    let delta_t = period * sup_p;
    let n_inf_sq = sup_p;
    let pe = mu1 > crate::linalg::PD_RELATIVE_TOL * mu2.max(1.0);
    let mu1_eff = if pe { mu1 } else { f64::NAN };
    let pi_const = 1.0 / sigma + 2.0 * sigma * period * delta_t * delta_t * n_inf_sq / mu1_eff;
    let gamma_young = 4.0 * sigma * period * delta_t * delta_t / mu1_eff;
    let z_m = regressor_bound(log, sched);
    let beta_c = z_m * (pi_const + 2.0 * delta_t);

    let mut m_trace = Vec::with_capacity(log.snapshots.len());
    for snap in &log.snapshots {
        let l = laplacian_matrices(sched.adjacency_at(snap.t)).laplacian;
        m_trace.push((snap.t, m_matrix_mineig(&l, &snap.y_if, mu_if)?));
    }
    let m_min_eig = m_trace
        .iter()
        .filter(|(t, _)| *t >= tbar - 1e-9)
        .map(|&(_, e)| e)
        .fold(f64::INFINITY, f64::min);
    let mu_if_lower = beta_c * beta_c * period / (2.0 * mu1_eff * m_min_eig.max(0.0));
    let lo = beta_c * period / mu1_eff;
    let hi = 2.0 * mu_if * m_min_eig / beta_c;
    let gamma_o = if hi > lo { (lo * hi).sqrt() } else { 2.0 * lo };
    let gain_condition_met = pe && m_min_eig > 0.0 && mu_if > mu_if_lower;

    Ok(CertificateReport {
        window: period,
        tbar,
        sigma,
        mu_if,
        constants: CertificateConstants {
            delta_t,
            pi_const,
            mu1,
            mu2,
            n_inf: n_inf_sq.sqrt(),
            gamma_young,
            gamma_o,
            beta_c,
            z_m,
            m_min_eig,
            mu_if_lower,
        },
        n_persistently_exciting: pe,
        gain_condition_met,
        factorization_residual: factorization_residual(sched)?,
        m_trace,
    })
}

/// `V` along the logged instants where `[t, t + T]` fits in the horizon.
#[derive(Clone, Debug, Serialize)]
pub struct LyapunovTrace {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Extreme eigenvalues of `S_n(t)` over the evaluated instants.
    pub s_min_eig: f64,
    pub s_max_eig: f64,
    pub s_bounds_ok: bool,
    /// Largest `(V_{k+1} - V_k) / V_k` among instants with `t_k ≥ from`.
    pub max_relative_increase: f64,
    /// First instant after `from` where `V` rose by more than the tolerance.
    pub first_increase_at: Option<f64>,
    pub non_increasing: bool,
}

pub const V_INCREASE_TOL: f64 = 1e-8;

pub fn lyapunov_trace(
    log: &TrajectoryLog,
    sched: &GraphSchedule,
    bias: &BiasVector,
    lambda: f64,
    consts: &CertificateConstants,
    period: f64,
    from: f64,
) -> Result<LyapunovTrace> {
    let m = log.m;
    let theta = bias.theta();
    let limit = sched.horizon() - period + 1e-9;
    let (mut times, mut values) = (Vec::new(), Vec::new());
    let (mut s_lo, mut s_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in log.records.iter().take_while(|r| r.t <= limit) {
        let s_n = lyapunov_s_n(sched, r.t, period, consts.delta_t)?;
        let (lo, hi) = eig_extremes(&s_n);
        s_lo = s_lo.min(lo);
        s_hi = s_hi.max(hi);
        let form = LyapunovForm::new(&s_n, m, consts.pi_const);
        let s = composite_error(&r.q, &r.qdot, &r.theta_hat, bias, lambda);
        let eps = epsilon_transform(&s, m);
        let tt: f64 = r.theta_hat.iter().map(|th| (&theta - th).norm_squared()).sum();
        times.push(r.t);
        values.push(form.value(&eps, tt));
    }
    let mut max_rel = f64::NEG_INFINITY;
    let mut first = None;
    for k in 1..values.len() {
        if times[k - 1] < from - 1e-9 {
            continue;
        }
        let rel = (values[k] - values[k - 1]) / values[k - 1].abs().max(f64::MIN_POSITIVE);
        max_rel = max_rel.max(rel);
        if rel > V_INCREASE_TOL && first.is_none() {
            first = Some(times[k]);
        }
    }
    let slack = 1e-9 * consts.delta_t.max(1.0);
    let s_bounds_ok = s_lo >= -slack && s_hi <= 2.0 * consts.delta_t + slack;
    Ok(LyapunovTrace {
        times,
        values,
        s_min_eig: s_lo,
        s_max_eig: s_hi,
        s_bounds_ok,
        max_relative_increase: max_rel,
        first_increase_at: first,
        non_increasing: first.is_none(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Segment;

    fn path3() -> WeightedAdjacency {
        WeightedAdjacency::from_edges(3, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap()
    }

    #[test]
    fn epsilon_examples() {
        let s = DVector::from_vec(vec![1.0, 2.0, 1.0, 2.0]);
        assert_eq!(epsilon_transform(&s, 2).norm(), 0.0);
        let s = DVector::from_vec(vec![1.0, -1.0]);
        assert_eq!(epsilon_transform(&s, 1), s);
        let s = DVector::from_vec(vec![0.3, -2.0, 5.0, 1.0, 0.0, 7.5]);
        let e = epsilon_transform(&s, 3);
        assert!((epsilon_transform(&e, 3) - &e).norm() < 1e-14);
        assert!((e.rows(0, 3) + e.rows(3, 3)).norm() < 1e-14);
    }

    #[test]
    fn constant_graph_s_matches_closed_form() {
        let adj = path3();
        let sched = GraphSchedule::constant(adj.clone(), 10.0).unwrap();
        let p = consensus_gram(&adj);
        let pn = eig_extremes(&p).1;
        let period = 2.0;
        let s = lyapunov_s_n(&sched, 3.0, period, period * pn).unwrap();
        let expected = (DMatrix::identity(3, 3) * (2.0 * pn) - &p) * period;
        assert!((s - expected).abs().max() < 1e-12);
    }

    #[test]
    fn switching_s_matches_nested_quadrature() {
        let a = path3();
        let b = WeightedAdjacency::from_edges(3, &[(0, 2, 2.0)]).unwrap();
        let sched = GraphSchedule::new(
            vec![
                Segment { start: 0.0, end: 1.3, adjacency: a.clone() },
                Segment { start: 1.3, end: 2.0, adjacency: b.clone() },
                Segment { start: 2.0, end: 5.0, adjacency: a.clone() },
            ],
            5.0,
        )
        .unwrap();
        let (t, period, delta) = (0.9, 2.5, 4.0);
        let exact = lyapunov_s_n(&sched, t, period, delta).unwrap();
        // Brute-force ∫_t^{t+T} ∫_t^r P dτ dr with midpoint sums.
        let k = 2000;
        let h = period / k as f64;
        let mut inner = DMatrix::zeros(3, 3);
        let mut outer = DMatrix::zeros(3, 3);
        for j in 0..k {
            let mid = t + (j as f64 + 0.5) * h;
            let pj = consensus_gram(sched.adjacency_at(mid)) * h;
            outer += &inner * h + &pj * (0.5 * h);
            inner += pj;
        }
        let brute = DMatrix::identity(3, 3) * (2.0 * delta) - outer * (2.0 / period);
        assert!((exact - brute).abs().max() < 1e-2, "{}", h);
    }

    #[test]
    fn pe_level_of_constant_graph() {
        let sched = GraphSchedule::constant(path3(), 6.0).unwrap();
        let (mu1, mu2, _) = consensus_pe_levels(&sched, 2.0).unwrap();
        // Path on 3 nodes: L eigenvalues {0, 1, 3}, 1 1ᵀ/n adds 1 on the kernel.
        assert!((mu1 - 2.0).abs() < 1e-12);
        assert!((mu2 - 6.0).abs() < 1e-12);
    }

    #[test]
    fn m_matrix_kernel_at_start() {
        let l = laplacian_matrices(&path3()).laplacian;
        let y = vec![DMatrix::zeros(4, 4); 3];
        assert!(m_matrix_mineig(&l, &y, 15.0).unwrap().abs() < 1e-12);
        let y = vec![DMatrix::identity(4, 4); 3];
        assert!((m_matrix_mineig(&l, &y, 2.0).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn v_is_positive_definite() {
        let s = DMatrix::identity(2, 2) * 0.5;
        let form = LyapunovForm::new(&s, 1, 3.0);
        let eps = DVector::from_vec(vec![1.0, -1.0]);
        let v = form.value(&eps, 4.0);
        assert!(v >= 0.5 * (3.0 * 2.0 + 4.0));
    }
}
