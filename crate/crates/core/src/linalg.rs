//! Small dense linear-algebra helpers shared by the filtering, Riccati and
//! elimination code. Everything works on `nalgebra` dynamic matrices.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};
use num_complex::Complex64;

/// Eigenvalues of a real square matrix, `None` when the matrix has non-finite
/// entries or the QR iteration stalls on it and on its transpose.
pub fn eigenvalues(m: &DMatrix<f64>) -> Option<Vec<Complex64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let n = m.nrows();
    let cap = 200 * n.max(1);
    if let Some(s) = Schur::try_new(m.clone(), f64::EPSILON, cap)
        .or_else(|| Schur::try_new(m.transpose(), f64::EPSILON, cap))
    {
        return Some(s.complex_eigenvalues().iter().copied().collect());
    }
    // a diagonal shift changes the iteration path but not the eigenvectors
    let shift = 0.5 * m.amax().max(1.0);
    let shifted = m + DMatrix::identity(n, n) * shift;
    Schur::try_new(shifted, f64::EPSILON, cap)
        .map(|s| s.complex_eigenvalues().iter().map(|z| z - shift).collect())
}

/// Largest eigenvalue modulus. Zero for an empty matrix and `+∞` when the
/// eigenvalues cannot be computed.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    match eigenvalues(m) {
        Some(ev) => ev.iter().map(|z| z.norm()).fold(0.0, f64::max),
        None => f64::INFINITY,
    }
}

/// Replaces `m` by `(m + mᵀ)/2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_sym_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    SymmetricEigen::new(s).eigenvalues.min()
}

/// Spectral norm (largest singular value).
pub fn norm2(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.singular_values().max()
}

/// `ln det` of a symmetric positive definite matrix, `None` if the Cholesky
/// factorization fails.
pub fn logdet_spd(m: &DMatrix<f64>) -> Option<f64> {
    let chol = m.clone().cholesky()?;
    let l = chol.l_dirty();
    Some((0..m.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum())
}

/// Indices of a maximal linearly independent subset of rows, chosen greedily
/// in row order. A row is kept when its residual after projection onto the
/// span of the previously kept rows exceeds `rel_tol` times the largest row norm.
pub fn greedy_independent_rows(m: &DMatrix<f64>, rel_tol: f64) -> Vec<usize> {
    let scale = (0..m.nrows())
        .map(|i| m.row(i).norm())
        .fold(0.0, f64::max);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    if scale == 0.0 {
        return kept;
    }
    for i in 0..m.nrows() {
        let mut v: DVector<f64> = m.row(i).transpose();
        // two passes of Gram-Schmidt for stability
        for _ in 0..2 {
            for q in &basis {
                let d = q.dot(&v);
                v.axpy(-d, q, 1.0);
            }
        }
        let nv = v.norm();
        if nv > rel_tol * scale {
            basis.push(v / nv);
            kept.push(i);
        }
    }
    kept
}

/// Numerical rank with singular values above `rel_tol * σ_max`.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Full orthogonal factor `Q` (rows × rows) of the Householder QR of `m`.
pub fn full_q(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if m.ncols() == 0 || n == 0 {
        return DMatrix::identity(n, n);
    }
    let qr = m.clone().qr();
    let mut qt = DMatrix::identity(n, n);
    qr.q_tr_mul(&mut qt);
    qt.transpose()
}

/// Orthonormal basis of the orthogonal complement of the columns of `q1`,
/// which must already be orthonormal.
pub fn orthogonal_complement(q1: &DMatrix<f64>) -> DMatrix<f64> {
    let n = q1.nrows();
    let r = q1.ncols();
    let q = full_q(q1);
    q.columns(r, n - r).into_owned()
}

/// Solves `a x = b` for square `a` by LU, `None` if singular.
pub fn solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if a.nrows() == 0 {
        return Some(DMatrix::zeros(0, b.ncols()));
    }
    a.clone().lu().solve(b)
}

/// `b a⁻¹` for square `a`, computed as `(a⁻ᵀ bᵀ)ᵀ`.
pub fn right_solve(b: &DMatrix<f64>, a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    solve(&a.transpose(), &b.transpose()).map(|x| x.transpose())
}

/// Frobenius norm of `a - b` relative to `1 + ‖b‖`.
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / (1.0 + b.norm())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_rows_keep_first_of_duplicates() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(greedy_independent_rows(&m, 1e-10), vec![0, 2]);
    }

    #[test]
    fn complement_is_orthogonal() {
        let q1 = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 0.0]).normalize();
        let q2 = orthogonal_complement(&q1);
        assert_eq!(q2.ncols(), 2);
        assert!((q1.transpose() * &q2).norm() < 1e-14);
        assert!((q2.transpose() * &q2 - DMatrix::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn spectral_radius_of_rotation() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -0.5, 0.5, 0.0]);
        assert!((spectral_radius(&m) - 0.5).abs() < 1e-14);
    }
}
