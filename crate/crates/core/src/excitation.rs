//! Excitation conditions on sampled matrix signals.
//!
//! Gramians are trapezoidal integrals over the sample grid. Persistent
//! excitation uses the left Gramian `∫ φ φᵀ`, initial excitation the right
//! Gramian `∫ φᵀ φ`; the collective variants sum the Gramians of a family of
//! signals.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{is_bipartite, laplacian_matrices, GraphSchedule};
use crate::linalg::{eig_extremes, is_positive_definite, kron_identity, symmetrize, PD_RELATIVE_TOL};
use crate::plant::GainProfile;

/// Matrix-valued signal sampled on a strictly increasing time grid.
#[derive(Clone, Debug)]
pub struct MatrixSignal {
    times: Vec<f64>,
    values: Vec<DMatrix<f64>>,
}

impl MatrixSignal {
    pub fn new(times: Vec<f64>, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidSignal("need at least two samples".into()));
        }
        if times.len() != values.len() {
            return Err(Error::InvalidSignal(format!(
                "{} times but {} values",
                times.len(),
                values.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidSignal("times must be strictly increasing".into()));
        }
        let shape = values[0].shape();
        if values.iter().any(|v| v.shape() != shape) {
            return Err(Error::InvalidSignal("samples have different shapes".into()));
        }
        Ok(Self { times, values })
    }

    /// Samples `f` at the given instants.
    pub fn from_fn(times: Vec<f64>, f: impl Fn(f64) -> DMatrix<f64>) -> Result<Self> {
        let values = times.iter().map(|&t| f(t)).collect();
        Self::new(times, values)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    fn integrand(&self, side: Side) -> Vec<DMatrix<f64>> {
        self.values
            .iter()
            .map(|v| match side {
                Side::Left => v * v.transpose(),
                Side::Right => v.transpose() * v,
            })
            .collect()
    }

    fn check_window(&self, t0: f64, t1: f64) -> Result<()> {
        let tol = 1e-9 * (self.end() - self.start()).abs().max(1.0);
        if t0 < self.start() - tol || t1 > self.end() + tol || t1 < t0 {
            return Err(Error::WindowOutsideSamples {
                t0,
                t1,
                start: self.start(),
                end: self.end(),
            });
        }
        Ok(())
    }
}

/// `Left` integrates `φ φᵀ`, `Right` integrates `φᵀ φ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Running trapezoidal integral of a sampled, piecewise-linear integrand.
struct CumulativeIntegral {
    times: Vec<f64>,
    integrand: Vec<DMatrix<f64>>,
    prefix: Vec<DMatrix<f64>>,
}

impl CumulativeIntegral {
    fn new(times: Vec<f64>, integrand: Vec<DMatrix<f64>>) -> Self {
        let mut prefix = Vec::with_capacity(times.len());
        let mut acc = DMatrix::zeros(integrand[0].nrows(), integrand[0].ncols());
        prefix.push(acc.clone());
        for k in 1..times.len() {
            let h = times[k] - times[k - 1];
            acc += (&integrand[k - 1] + &integrand[k]) * (0.5 * h);
            prefix.push(acc.clone());
        }
        Self {
            times,
            integrand,
            prefix,
        }
    }

    /// `∫_{t_first}^{t}` with the integrand linearly interpolated.
    fn at(&self, t: f64) -> DMatrix<f64> {
        let last = self.times.len() - 1;
        if t <= self.times[0] {
            return self.prefix[0].clone();
        }
        if t >= self.times[last] {
            return self.prefix[last].clone();
        }
        let k = self.times.partition_point(|&s| s <= t) - 1;
        let dt = t - self.times[k];
        if dt == 0.0 {
            return self.prefix[k].clone();
        }
        let h = self.times[k + 1] - self.times[k];
        let fk = &self.integrand[k];
        let slope = (&self.integrand[k + 1] - fk) / h;
        &self.prefix[k] + fk * dt + slope * (0.5 * dt * dt)
    }

    fn window(&self, t0: f64, t1: f64) -> DMatrix<f64> {
        symmetrize(&(self.at(t1) - self.at(t0)))
    }
}

/// Trapezoidal Gramian of `sig` over `[t0, t1]`, symmetrized.
pub fn gramian(sig: &MatrixSignal, t0: f64, t1: f64, side: Side) -> Result<DMatrix<f64>> {
    sig.check_window(t0, t1)?;
    let integral = CumulativeIntegral::new(sig.times.clone(), sig.integrand(side));
    Ok(integral.window(t0, t1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ExcitationKind {
    #[serde(rename = "PE")]
    Pe,
    #[serde(rename = "IE")]
    Ie,
    #[serde(rename = "C-PE")]
    CollectivePe,
    #[serde(rename = "C-IE")]
    CollectiveIe,
}

/// Verdict of an excitation test together with the Gramian spectrum bounds
/// that produced it.
#[derive(Clone, Debug, Serialize)]
pub struct ExcitationReport {
    pub kind: ExcitationKind,
    pub verdict: bool,
    /// Smallest Gramian eigenvalue found (`μ₁`, `η` or `γ`).
    pub level: f64,
    /// Largest Gramian eigenvalue found (`μ₂` for PE).
    pub upper_level: f64,
    /// `(t0, window length)` of the window attaining `level`.
    pub window: (f64, f64),
    pub tolerance: f64,
}

impl ExcitationReport {
    fn from_levels(kind: ExcitationKind, level: f64, upper: f64, window: (f64, f64)) -> Self {
        let tolerance = PD_RELATIVE_TOL * upper.max(1.0);
        Self {
            kind,
            verdict: level > tolerance,
            level,
            upper_level: upper,
            window,
            tolerance,
        }
    }
}

/// Window starts on the sample grid such that `[t, t + len]` fits.
fn window_starts(times: &[f64], len: f64) -> Vec<f64> {
    let end = times[times.len() - 1];
    let tol = 1e-9 * len.max(1.0);
    times
        .iter()
        .copied()
        .take_while(|&t| t + len <= end + tol)
        .collect()
}

fn scan_windows(
    integral: &CumulativeIntegral,
    starts: &[f64],
    len: f64,
) -> (f64, f64, f64) {
    let mut level = f64::INFINITY;
    let mut upper: f64 = 0.0;
    let mut at = starts.first().copied().unwrap_or_default();
    for &t in starts {
        let (lo, hi) = eig_extremes(&integral.window(t, t + len));
        if lo < level {
            level = lo;
            at = t;
        }
        upper = upper.max(hi);
    }
    (level, upper, at)
}

/// Persistent excitation: every window `[t, t + T]` on the sample grid.
pub fn check_pe(sig: &MatrixSignal, period: f64) -> Result<ExcitationReport> {
    if !(period > 0.0) {
        return Err(Error::InvalidSignal("window length must be positive".into()));
    }
    sig.check_window(sig.start(), sig.start() + period)?;
    let integral = CumulativeIntegral::new(sig.times.clone(), sig.integrand(Side::Left));
    let starts = window_starts(&sig.times, period);
    let (level, upper, at) = scan_windows(&integral, &starts, period);
    Ok(ExcitationReport::from_levels(
        ExcitationKind::Pe,
        level,
        upper,
        (at, period),
    ))
}

/// Initial excitation on the single window `[t0, t0 + T̄]`.
pub fn check_ie(sig: &MatrixSignal, tbar: f64, t0: f64) -> Result<ExcitationReport> {
    let g = gramian(sig, t0, t0 + tbar, Side::Right)?;
    let (lo, hi) = eig_extremes(&g);
    Ok(ExcitationReport::from_levels(ExcitationKind::Ie, lo, hi, (t0, tbar)))
}

fn common_columns(sigs: &[MatrixSignal]) -> Result<usize> {
    let first = sigs
        .first()
        .ok_or_else(|| Error::ShapeMismatch("empty signal set".into()))?;
    let cols = first.shape().1;
    if let Some(bad) = sigs.iter().find(|s| s.shape().1 != cols) {
        return Err(Error::ShapeMismatch(format!(
            "column dimension {} differs from {cols}",
            bad.shape().1
        )));
    }
    Ok(cols)
}

/// Collective initial excitation: `λ_min(Σ_i ∫ φᵢᵀ φᵢ)` on `[t0, t0 + T̄]`.
pub fn check_cie(sigs: &[MatrixSignal], tbar: f64, t0: f64) -> Result<ExcitationReport> {
    let cols = common_columns(sigs)?;
    let mut sum = DMatrix::zeros(cols, cols);
    for s in sigs {
        sum += gramian(s, t0, t0 + tbar, Side::Right)?;
    }
    let (lo, hi) = eig_extremes(&sum);
    Ok(ExcitationReport::from_levels(
        ExcitationKind::CollectiveIe,
        lo,
        hi,
        (t0, tbar),
    ))
}

/// Collective persistent excitation over all windows. The signals must share
/// a time grid and row dimension.
pub fn check_cpe(sigs: &[MatrixSignal], period: f64) -> Result<ExcitationReport> {
    let first = sigs
        .first()
        .ok_or_else(|| Error::ShapeMismatch("empty signal set".into()))?;
    let rows = first.shape().0;
    if sigs.iter().any(|s| s.shape().0 != rows || s.times != first.times) {
        return Err(Error::ShapeMismatch(
            "C-PE needs a common time grid and row dimension".into(),
        ));
    }
    first.check_window(first.start(), first.start() + period)?;
    let mut integrand = first.integrand(Side::Left);
    for s in &sigs[1..] {
        for (acc, v) in integrand.iter_mut().zip(s.integrand(Side::Left)) {
            *acc += v;
        }
    }
    let integral = CumulativeIntegral::new(first.times.clone(), integrand);
    let starts = window_starts(&first.times, period);
    let (level, upper, at) = scan_windows(&integral, &starts, period);
    Ok(ExcitationReport::from_levels(
        ExcitationKind::CollectivePe,
        level,
        upper,
        (at, period),
    ))
}

/// Stacked velocity and acceleration of the whole network at one instant.
#[derive(Clone, Debug)]
pub struct KinematicSample {
    pub t: f64,
    pub qdot: DVector<f64>,
    pub qddot: DVector<f64>,
}

/// Integrated blocks of `Σ Yᵢᵀ Yᵢ = [[A, B], [Bᵀ, C]]` over `[0, T̄]`.
#[derive(Clone, Debug, Serialize)]
pub struct NecessityBlocks {
    #[serde(skip)]
    pub int_a: DMatrix<f64>,
    #[serde(skip)]
    pub int_b: DMatrix<f64>,
    #[serde(skip)]
    pub int_c: DMatrix<f64>,
    pub a_min_eig: f64,
    pub c_min_eig: f64,
    pub a_pd: bool,
    pub c_pd: bool,
    pub union_nonbipartite: bool,
}

/// Simpson's rule for a smooth scalar integrand.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let n = intervals.max(2) + intervals % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + k as f64 * h);
    }
    acc * h / 3.0
}

/// Block decomposition behind the necessity of joint non-bipartiteness.
///
/// `A` and `B` come from the sampled trajectory by trapezoidal quadrature.
/// `C = (k²/4) Q̄ᵀ Q̄` does not depend on the trajectory and is integrated
/// segment by segment from the schedule. The union graph is taken over
/// `[0, max(T, T̄)]`, clipped to the schedule horizon.
pub fn necie_blocks(
    traj: &[KinematicSample],
    m: usize,
    k: &GainProfile,
    sched: &GraphSchedule,
    tbar: f64,
    connectivity_period: f64,
) -> Result<NecessityBlocks> {
    let n = sched.n();
    let mn = m * n;
    let tol = 1e-9 * tbar.max(1.0);
    match (traj.first(), traj.last()) {
        (Some(first), Some(last)) if first.t <= tol && last.t >= tbar - tol => {}
        _ => {
            return Err(Error::Coverage(format!(
                "trajectory must cover [0, {tbar}]"
            )))
        }
    }
    if traj.iter().any(|s| s.qdot.len() != mn || s.qddot.len() != mn) {
        return Err(Error::ShapeMismatch(format!(
            "kinematic samples must have length {mn}"
        )));
    }

    let mut int_a = DMatrix::zeros(2, 2);
    let mut int_b = DMatrix::zeros(2, mn);
    let integrand = |s: &KinematicSample| {
        let kt = k.eval(s.t);
        let a = DMatrix::from_row_slice(
            2,
            2,
            &[
                s.qddot.dot(&s.qddot),
                kt * s.qddot.dot(&s.qdot),
                kt * s.qdot.dot(&s.qddot),
                kt * kt * s.qdot.dot(&s.qdot),
            ],
        );
        let qbar = kron_identity(&laplacian_matrices(sched.adjacency_at(s.t)).signless, m);
        let mut b = DMatrix::zeros(2, mn);
        b.row_mut(0)
            .copy_from(&((s.qddot.transpose() * &qbar) * (0.5 * kt)));
        b.row_mut(1)
            .copy_from(&((s.qdot.transpose() * &qbar) * (0.5 * kt * kt)));
        (a, b)
    };
    for w in traj.windows(2) {
        let (t0, t1) = (w[0].t, w[1].t.min(tbar));
        if t1 <= t0 {
            break;
        }
        let (a0, b0) = integrand(&w[0]);
        let (a1, b1) = integrand(&w[1]);
        let frac = (t1 - t0) / (w[1].t - w[0].t);
        // Linear interpolation of the integrand to the clipped end point.
        let a_end = &a0 + (a1 - &a0) * frac;
        let b_end = &b0 + (b1 - &b0) * frac;
        int_a += (a0 + a_end) * (0.5 * (t1 - t0));
        int_b += (b0 + b_end) * (0.5 * (t1 - t0));
    }

    let mut int_c_small = DMatrix::zeros(n, n);
    for (a, b, seg) in sched.pieces(0.0, tbar.min(sched.horizon())) {
        let q = laplacian_matrices(&seg.adjacency).signless;
        let k2 = simpson(|t| k.eval(t).powi(2), a, b, 64);
        int_c_small += (q.transpose() * q) * (0.25 * k2);
    }
    let int_c = kron_identity(&int_c_small, m);

    let span = connectivity_period.max(tbar).min(sched.horizon());
    let union = sched.union_graph(0.0, span)?;
    let union_nonbipartite = !is_bipartite(&union).bipartite;

    Ok(NecessityBlocks {
        a_min_eig: eig_extremes(&int_a).0,
        c_min_eig: eig_extremes(&int_c).0,
        a_pd: is_positive_definite(&int_a),
        c_pd: is_positive_definite(&int_c),
        int_a,
        int_b,
        int_c,
        union_nonbipartite,
    })
}
