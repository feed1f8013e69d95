//! Time-varying undirected graph algebra.
//!
//! A [`GraphSchedule`] is a piecewise-constant sequence of weighted adjacency
//! matrices. Everything the controller and the analyses need (Laplacian,
//! signless Laplacian, weighted incidence, union graphs, joint connectivity)
//! is derived from it here.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symmetric, non-negative, zero-diagonal weight matrix of an undirected graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct WeightedAdjacency {
    a: DMatrix<f64>,
}

impl WeightedAdjacency {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::InvalidAdjacency(format!(
                "matrix is {}x{}, expected square",
                a.nrows(),
                a.ncols()
            )));
        }
        let n = a.nrows();
        for i in 0..n {
            if a[(i, i)] != 0.0 {
                return Err(Error::InvalidAdjacency(format!(
                    "self edge at node {i} (weight {})",
                    a[(i, i)]
                )));
            }
            for j in 0..n {
                let w = a[(i, j)];
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::InvalidAdjacency(format!(
                        "weight a[{i}][{j}] = {w} is not a finite non-negative number"
                    )));
                }
                if w != a[(j, i)] {
                    return Err(Error::InvalidAdjacency(format!(
                        "a[{i}][{j}] = {w} differs from a[{j}][{i}] = {}",
                        a[(j, i)]
                    )));
                }
            }
        }
        Ok(Self { a })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidAdjacency("ragged rows".into()));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn empty(n: usize) -> Self {
        Self {
            a: DMatrix::zeros(n, n),
        }
    }

    /// Graph with the listed undirected edges `(i, j, weight)`.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut a = DMatrix::zeros(n, n);
        for &(i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidAdjacency(format!(
                    "edge ({i}, {j}) out of range for {n} nodes"
                )));
            }
            a[(i, j)] = w;
            a[(j, i)] = w;
        }
        Self::new(a)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.a[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Present edges `(i, j, a_ij)` with `i < j`, lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.n();
        (0..n)
            .flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
            .filter_map(move |(i, j)| {
                let w = self.a[(i, j)];
                (w > 0.0).then_some((i, j, w))
            })
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.n()).filter_map(move |j| {
            let w = self.a[(i, j)];
            (w > 0.0).then_some((j, w))
        })
    }

    pub fn max_weight(&self) -> f64 {
        self.a.iter().copied().fold(0.0, f64::max)
    }

    /// Checks the uniform weight bound `a_ij <= a_max`.
    pub fn check_bound(&self, a_max: f64) -> Result<()> {
        let w = self.max_weight();
        if w > a_max {
            return Err(Error::InvalidAdjacency(format!(
                "weight {w} exceeds the bound {a_max}"
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { a: &self.a * c }
    }

    pub fn degree_vector(&self) -> DVector<f64> {
        DVector::from_fn(self.n(), |i, _| self.a.row(i).sum())
    }

    pub fn is_connected(&self) -> bool {
        connected_components(self.n(), self.edges().map(|(i, j, _)| (i, j))) <= 1
    }
}

impl TryFrom<Vec<Vec<f64>>> for WeightedAdjacency {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<WeightedAdjacency> for Vec<Vec<f64>> {
    fn from(adj: WeightedAdjacency) -> Self {
        let n = adj.n();
        (0..n)
            .map(|i| (0..n).map(|j| adj.a[(i, j)]).collect())
            .collect()
    }
}

/// Degree, Laplacian `L = D - A` and signless Laplacian `Q = D + A`.
#[derive(Clone, Debug)]
pub struct GraphMatrices {
    pub laplacian: DMatrix<f64>,
    pub signless: DMatrix<f64>,
    pub degree: DMatrix<f64>,
}

pub fn laplacian_matrices(adj: &WeightedAdjacency) -> GraphMatrices {
    let degree = DMatrix::from_diagonal(&adj.degree_vector());
    GraphMatrices {
        laplacian: &degree - adj.matrix(),
        signless: &degree + adj.matrix(),
        degree,
    }
}

/// Column ordering of the `n(n-1)/2` potential edges: lexicographic pairs
/// `(i, j)` with `i < j`, tail at `i`, head at `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeIndexing {
    n: usize,
    pairs: Vec<(usize, usize)>,
}

impl EdgeIndexing {
    pub fn new(n: usize) -> Self {
        let pairs = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect();
        Self { n, pairs }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair(&self, column: usize) -> (usize, usize) {
        self.pairs[column]
    }

    pub fn column(&self, i: usize, j: usize) -> Option<usize> {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        if i == j || j >= self.n {
            return None;
        }
        // Pairs with tail < i come first: sum_{k<i} (n-1-k).
        Some(i * (2 * self.n - i - 1) / 2 + (j - i - 1))
    }
}

/// Weighted incidence matrix: column `(i, j)` carries `+sqrt(a_ij)` at the
/// tail `i` and `-sqrt(a_ij)` at the head `j`, so that `H Hᵀ = L`.
pub fn weighted_incidence(adj: &WeightedAdjacency, idx: &EdgeIndexing) -> Result<DMatrix<f64>> {
    if idx.n() != adj.n() {
        return Err(Error::ShapeMismatch(format!(
            "edge indexing for {} nodes used with a {}-node graph",
            idx.n(),
            adj.n()
        )));
    }
    let mut h = DMatrix::zeros(adj.n(), idx.len());
    for (col, &(i, j)) in idx.pairs.iter().enumerate() {
        let w = adj.weight(i, j);
        if w > 0.0 {
            let r = w.sqrt();
            h[(i, col)] = r;
            h[(j, col)] = -r;
        }
    }
    Ok(h)
}

/// Result of a two-colouring attempt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Bipartition {
    pub bipartite: bool,
    /// `(V+, V-)` when bipartite. Edgeless graphs put every node in `V+`.
    pub partition: Option<(Vec<usize>, Vec<usize>)>,
}

pub fn is_bipartite(adj: &WeightedAdjacency) -> Bipartition {
    let n = adj.n();
    let mut color: Vec<Option<bool>> = vec![None; n];
    let mut queue = VecDeque::new();
    for root in 0..n {
        if color[root].is_some() {
            continue;
        }
        color[root] = Some(true);
        queue.push_back(root);
        while let Some(u) = queue.pop_front() {
            let cu = color[u].unwrap_or(true);
            for (v, _) in adj.neighbors(u) {
                match color[v] {
                    None => {
                        color[v] = Some(!cu);
                        queue.push_back(v);
                    }
                    Some(cv) if cv == cu => {
                        return Bipartition {
                            bipartite: false,
                            partition: None,
                        };
                    }
                    Some(_) => {}
                }
            }
        }
    }
    let (plus, minus): (Vec<usize>, Vec<usize>) =
        (0..n).partition(|&i| color[i].unwrap_or(true));
    Bipartition {
        bipartite: true,
        partition: Some((plus, minus)),
    }
}

fn connected_components(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut components = n;
    for (i, j) in edges {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            parent[ri] = rj;
            components -= 1;
        }
    }
    components
}

/// Unit vector spanning part of the kernel of an incidence matrix.
///
/// Takes the eigenvector of `HᵀH` with the smallest eigenvalue (the smallest
/// right singular vector of `H`) and flips it so its first nonzero entry is
/// positive.
pub fn kernel_unit_vector(h: &DMatrix<f64>) -> Result<DVector<f64>> {
    let cols = h.ncols();
    if cols == 0 {
        return Err(Error::TrivialKernel);
    }
    let gram = h.transpose() * h;
    let eig = crate::linalg::symmetric_eigen(&gram);
    let (mut best, mut best_val) = (0, f64::INFINITY);
    let mut max_val: f64 = 0.0;
    for (k, &v) in eig.eigenvalues.iter().enumerate() {
        max_val = max_val.max(v);
        if v < best_val {
            best = k;
            best_val = v;
        }
    }
    if best_val > 1e-9 * max_val.max(1.0) {
        return Err(Error::TrivialKernel);
    }
    let mut v: DVector<f64> = eig.eigenvectors.column(best).into_owned();
    v /= v.norm();
    // Eigenvectors of a clustered spectrum can leave a residual near 1e-10.
    // Project out the row space of H through the pseudo-inverse of H Hᵀ.
    let lap = h * h.transpose();
    let le = crate::linalg::symmetric_eigen(&lap);
    let cut = 1e-9 * le.eigenvalues.amax().max(1.0);
    for _ in 0..2 {
        let r = h * &v;
        let mut y = DVector::zeros(r.len());
        for (k, &lk) in le.eigenvalues.iter().enumerate() {
            if lk > cut {
                let u = le.eigenvectors.column(k);
                y += u * (u.dot(&r) / lk);
            }
        }
        v -= h.transpose() * y;
        v /= v.norm();
    }
    if let Some(&first) = v.iter().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            v = -v;
        }
    }
    Ok(v)
}

/// `N = H + 1 hᵀ / sqrt(n)`, which factors `L + 1 1ᵀ / n = N Nᵀ`.
pub fn consensus_factor(adj: &WeightedAdjacency) -> Result<DMatrix<f64>> {
    let n = adj.n();
    let idx = EdgeIndexing::new(n);
    let h = weighted_incidence(adj, &idx)?;
    let kernel = kernel_unit_vector(&h)?;
    let ones = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    Ok(h + ones * kernel.transpose())
}

/// One constant piece of a schedule, active on `[start, end)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    #[serde(rename = "t_start")]
    pub start: f64,
    #[serde(rename = "t_end")]
    pub end: f64,
    #[serde(rename = "weights")]
    pub adjacency: WeightedAdjacency,
}

impl Segment {
    pub fn dwell(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Deserialize)]
struct RawSchedule {
    horizon: f64,
    segments: Vec<Segment>,
}

/// Piecewise-constant time-varying weighted adjacency on `[0, horizon]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule")]
pub struct GraphSchedule {
    horizon: f64,
    segments: Vec<Segment>,
}

impl TryFrom<RawSchedule> for GraphSchedule {
    type Error = Error;

    fn try_from(raw: RawSchedule) -> Result<Self> {
        Self::new(raw.segments, raw.horizon)
    }
}

fn time_tol(horizon: f64) -> f64 {
    1e-12 * horizon.abs().max(1.0)
}

impl GraphSchedule {
    pub fn new(segments: Vec<Segment>, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidSchedule(format!("horizon {horizon} must be positive")));
        }
        let first = segments
            .first()
            .ok_or_else(|| Error::InvalidSchedule("no segments".into()))?;
        let n = first.adjacency.n();
        let tol = time_tol(horizon);
        if first.start.abs() > tol {
            return Err(Error::InvalidSchedule(format!(
                "first segment starts at {} instead of 0",
                first.start
            )));
        }
        for (k, seg) in segments.iter().enumerate() {
            if seg.adjacency.n() != n {
                return Err(Error::InvalidSchedule(format!(
                    "segment {k} has {} nodes, expected {n}",
                    seg.adjacency.n()
                )));
            }
            if !(seg.end > seg.start) {
                return Err(Error::InvalidSchedule(format!(
                    "segment {k} has non-positive dwell [{}, {}]",
                    seg.start, seg.end
                )));
            }
            if let Some(next) = segments.get(k + 1) {
                if (next.start - seg.end).abs() > tol {
                    return Err(Error::InvalidSchedule(format!(
                        "gap or overlap between segment {k} (ends {}) and {} (starts {})",
                        seg.end,
                        k + 1,
                        next.start
                    )));
                }
            }
        }
        let last = segments.last().map(|s| s.end).unwrap_or_default();
        if (last - horizon).abs() > tol {
            return Err(Error::InvalidSchedule(format!(
                "segments end at {last} but the horizon is {horizon}"
            )));
        }
        Ok(Self { horizon, segments })
    }

    /// A single graph held for the whole horizon.
    pub fn constant(adj: WeightedAdjacency, horizon: f64) -> Result<Self> {
        Self::new(
            vec![Segment {
                start: 0.0,
                end: horizon,
                adjacency: adj,
            }],
            horizon,
        )
    }

    /// Appends `other` shifted to start at this schedule's horizon.
    pub fn concat(mut self, other: GraphSchedule) -> Result<Self> {
        let offset = self.horizon;
        let mut segments = std::mem::take(&mut self.segments);
        let count = other.segments.len();
        for (k, mut seg) in other.segments.into_iter().enumerate() {
            seg.start = if k == 0 {
                offset
            } else {
                segments.last().map(|s: &Segment| s.end).unwrap_or(offset)
            };
            seg.end += offset;
            if k + 1 == count {
                seg.end = offset + other.horizon;
            }
            segments.push(seg);
        }
        Self::new(segments, offset + other.horizon)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n(&self) -> usize {
        self.segments[0].adjacency.n()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Index of the segment active at `t` (right-continuous; the last
    /// segment is returned for `t >= horizon`).
    pub fn segment_index_at(&self, t: f64) -> usize {
        let k = self.segments.partition_point(|s| s.start <= t);
        k.saturating_sub(1).min(self.segments.len() - 1)
    }

    pub fn adjacency_at(&self, t: f64) -> &WeightedAdjacency {
        &self.segments[self.segment_index_at(t)].adjacency
    }

    /// Switch instants strictly inside `(0, horizon)`.
    pub fn switch_times(&self) -> impl Iterator<Item = f64> + '_ {
        self.segments.iter().skip(1).map(|s| s.start)
    }

    /// Restriction of the schedule to `[0, horizon]`.
    pub fn truncated(&self, horizon: f64) -> Result<Self> {
        if horizon > self.horizon + time_tol(self.horizon) {
            return Err(Error::OutsideHorizon {
                t0: 0.0,
                t1: horizon,
                horizon: self.horizon,
            });
        }
        let mut segments: Vec<Segment> = self
            .segments
            .iter()
            .filter(|s| s.start < horizon)
            .cloned()
            .collect();
        if let Some(last) = segments.last_mut() {
            last.end = horizon;
        }
        Self::new(segments, horizon)
    }

    fn check_interval(&self, t0: f64, t1: f64) -> Result<()> {
        let tol = time_tol(self.horizon);
        if t0 < -tol || t1 > self.horizon + tol || !(t1 > t0) {
            return Err(Error::OutsideHorizon {
                t0,
                t1,
                horizon: self.horizon,
            });
        }
        Ok(())
    }

    /// Pieces `(a, b, segment)` of the schedule overlapping `[t0, t1]`.
    pub fn pieces(&self, t0: f64, t1: f64) -> impl Iterator<Item = (f64, f64, &Segment)> + '_ {
        let first = self.segment_index_at(t0);
        self.segments[first..]
            .iter()
            .take_while(move |s| s.start < t1)
            .filter_map(move |s| {
                let a = s.start.max(t0);
                let b = s.end.min(t1);
                (b > a).then_some((a, b, s))
            })
    }

    /// Union graph over `[t0, t1]`: entries are `∫ a_ij(τ) dτ`.
    pub fn union_graph(&self, t0: f64, t1: f64) -> Result<WeightedAdjacency> {
        self.check_interval(t0, t1)?;
        let n = self.n();
        let mut acc = DMatrix::zeros(n, n);
        for (a, b, seg) in self.pieces(t0, t1) {
            acc += seg.adjacency.matrix() * (b - a);
        }
        WeightedAdjacency::new(acc)
    }

    /// Joint `(δ, T)`-connectivity. Window starts are every segment boundary
    /// `s` and `s - T` that fit inside the horizon, plus a uniform grid with
    /// step `grid_step` (default `T / 20`).
    pub fn is_jointly_connected(&self, delta: f64, period: f64, grid_step: Option<f64>) -> Result<bool> {
        if !(delta > 0.0 && period > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "joint connectivity needs delta > 0 and T > 0 (got {delta}, {period})"
            )));
        }
        if period > self.horizon + time_tol(self.horizon) {
            return Err(Error::InvalidConfig(format!(
                "window {period} is longer than the horizon {}",
                self.horizon
            )));
        }
        let last_start = (self.horizon - period).max(0.0);
        let step = grid_step.unwrap_or(period / 20.0);
        if !(step > 0.0) {
            return Err(Error::InvalidConfig("grid step must be positive".into()));
        }
        let mut starts: Vec<f64> = Vec::new();
        let grid_points = (last_start / step).floor() as usize;
        starts.extend((0..=grid_points).map(|k| k as f64 * step));
        starts.push(last_start);
        for s in self.segments.iter().map(|s| s.start) {
            for cand in [s, s - period] {
                if (0.0..=last_start).contains(&cand) {
                    starts.push(cand);
                }
            }
        }
        starts.sort_by(f64::total_cmp);
        starts.dedup();
        let n = self.n();
        let threshold = delta * (1.0 - 1e-12);
        for t in starts {
            let t1 = (t + period).min(self.horizon);
            let union = self.union_graph(t, t1)?;
            let strong = union
                .edges()
                .filter(|&(_, _, w)| w >= threshold)
                .map(|(i, j, _)| (i, j));
            if connected_components(n, strong) > 1 {
                return Ok(false);
            }
        }
        Ok(true)
    }
}
