//! Small dense helpers shared by the analysis modules.

use nalgebra::{DMatrix, DVector, Dyn, SymmetricEigen};

/// Relative cutoff below which a symmetric PSD matrix counts as singular.
pub const PD_RELATIVE_TOL: f64 = 1e-8;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigen-decomposition of the symmetric part of `m`.
///
/// nalgebra's implicit QR occasionally fails on PSD matrices with exact zero
/// rows (a leaf agent's information matrix, for instance): it either returns
/// NaN or a finite decomposition that does not reproduce the input. Every
/// result is therefore checked, and failures fall back to cyclic Jacobi.
pub fn symmetric_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, Dyn> {
    let sym = symmetrize(m);
    if sym.iter().any(|x| !x.is_finite()) {
        return SymmetricEigen::new(sym);
    }
    let eig = SymmetricEigen::new(sym.clone());
    if decomposition_ok(&eig, &sym) {
        return eig;
    }
    let (eigenvalues, eigenvectors) = jacobi_eigen(sym);
    SymmetricEigen { eigenvectors, eigenvalues }
}

fn decomposition_ok(eig: &SymmetricEigen<f64, Dyn>, a: &DMatrix<f64>) -> bool {
    let v = &eig.eigenvectors;
    if eig.eigenvalues.iter().chain(v.iter()).any(|x| !x.is_finite()) {
        return false;
    }
    let n = a.nrows();
    let tol = 1e-10 * (n as f64);
    let orth = (v.tr_mul(v) - DMatrix::<f64>::identity(n, n)).amax();
    let recon = (v * DMatrix::from_diagonal(&eig.eigenvalues) * v.transpose() - a).amax();
    orth <= tol && recon <= tol * (1.0 + a.amax())
}

fn jacobi_eigen(mut a: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut v = DMatrix::identity(n, n);
    let scale = a.norm_squared();
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off <= 1e-32 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let sign = if theta < 0.0 { -1.0 } else { 1.0 };
                let t = sign / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                for k in 0..n {
                    let (x, y) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * x - s * y;
                    a[(k, q)] = s * x + c * y;
                }
                for k in 0..n {
                    let (x, y) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * x - s * y;
                    a[(q, k)] = s * x + c * y;
                }
                for k in 0..n {
                    let (x, y) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * x - s * y;
                    v[(k, q)] = s * x + c * y;
                }
            }
        }
    }
    (a.diagonal(), v)
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eig_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 0 {
        return (0.0, 0.0);
    }
    let eig = symmetric_eigen(m);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    eig_extremes(m).0
}

/// Eigenvalues in ascending order.
pub fn sorted_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = symmetric_eigen(m)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Scale-free positive-definiteness test: `λ_min > 1e-8 · max(1, λ_max)`.
pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    let (min, max) = eig_extremes(m);
    min > PD_RELATIVE_TOL * max.max(1.0)
}

/// `a ⊗ I_m`.
pub fn kron_identity(a: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() * m, a.ncols() * m);
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let v = a[(i, j)];
            if v != 0.0 {
                for d in 0..m {
                    out[(i * m + d, j * m + d)] = v;
                }
            }
        }
    }
    out
}

/// Euclidean norm of the difference between two stacked vectors.
pub fn distance(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm()
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let gram = if m.nrows() < m.ncols() {
        m * m.transpose()
    } else {
        m.transpose() * m
    };
    eig_extremes(&gram).1.max(0.0).sqrt()
}
