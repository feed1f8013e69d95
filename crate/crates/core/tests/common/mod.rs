#![allow(dead_code)]

use biasnet::WeightedAdjacency;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Random connected graph: a random spanning tree plus each remaining pair
/// with probability `extra`, weights uniform in `[0.2, 2]`.
pub fn random_connected<R: Rng>(rng: &mut R, n: usize, extra: f64) -> WeightedAdjacency {
    let mut edges = Vec::new();
    for j in 1..n {
        edges.push((rng.gen_range(0..j), j, rng.gen_range(0.2..2.0)));
    }
    for i in 0..n {
        for j in i + 1..n {
            if !edges.iter().any(|&(a, b, _)| (a, b) == (i, j)) && rng.gen_bool(extra) {
                edges.push((i, j, rng.gen_range(0.2..2.0)));
            }
        }
    }
    WeightedAdjacency::from_edges(n, &edges).unwrap()
}

pub fn degree(adj: &WeightedAdjacency) -> DMatrix<f64> {
    let a = adj.matrix();
    DMatrix::from_diagonal(&DVector::from_iterator(a.nrows(), a.row_iter().map(|r| r.sum())))
}

/// Ascending eigenvalues of a symmetric matrix, by an independent route
/// (nalgebra's Schur form of the matrix, no symmetric shortcuts).
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = m.clone().schur().eigenvalues().expect("real spectrum").iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Two-colouring by depth-first search over the adjacency matrix.
pub fn has_odd_cycle(adj: &WeightedAdjacency) -> bool {
    let n = adj.n();
    let mut colour = vec![-1i8; n];
    for root in 0..n {
        if colour[root] >= 0 {
            continue;
        }
        colour[root] = 0;
        let mut stack = vec![root];
        while let Some(u) = stack.pop() {
            for v in 0..n {
                if adj.weight(u, v) > 0.0 {
                    if colour[v] < 0 {
                        colour[v] = 1 - colour[u];
                        stack.push(v);
                    } else if colour[v] == colour[u] {
                        return true;
                    }
                }
            }
        }
    }
    false
}
