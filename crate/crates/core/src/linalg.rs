//! Small dense linear-algebra helpers shared by the smoother and the M-step.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// Relative eigenvalue floor for the positive-definiteness guard.
pub const PD_FLOOR: f64 = 1e-12;

/// Replace `m` by `(m + m') / 2` in place.
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

/// Symmetrize and, when an eigenvalue sits below `PD_FLOOR * trace`, add a
/// diagonal jitter of that magnitude. Returns the jitter that was applied.
pub fn pd_guard(m: &mut DMatrix<f64>) -> f64 {
    symmetrize(m);
    let trace = m.trace().abs().max(f64::MIN_POSITIVE);
    let floor = PD_FLOOR * trace;
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < floor {
        let jitter = floor - min.min(0.0);
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        jitter
    } else {
        0.0
    }
}

/// Cholesky factorization that falls back to the PD guard once when the
/// plain factorization fails.
pub fn robust_cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Some(c);
    }
    let mut g = m.clone();
    pd_guard(&mut g);
    Cholesky::new(g)
}

/// `log |m|` from a Cholesky factor.
pub fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Log density of `N(x; mean, cov)` given the Cholesky factor of `cov`.
pub fn gaussian_logpdf(resid: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let n = resid.len() as f64;
    let sol = chol.solve(resid);
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + chol_logdet(chol) + resid.dot(&sol))
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix via its eigenvalues.
pub fn sym_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let cut = max * 1e-12 * m.nrows() as f64;
    let inv = eig.eigenvalues.map(|v| if v.abs() > cut { 1.0 / v } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let c = robust_cholesky(m)?;
    let mut inv = c.inverse();
    symmetrize(&mut inv);
    Some(inv)
}
