//! Small dense complex linear-algebra helpers on top of `nalgebra`.
//!
//! Everything here works on heap-allocated `DMatrix<Complex<f64>>`; the
//! matrices involved are at most a few hundred rows.

use nalgebra::{DMatrix, DVector, Schur};
use num_complex::Complex;

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const J: C64 = C64::new(0.0, 1.0);

/// `exp(j * phase)`.
#[inline]
pub fn cis(phase: f64) -> C64 {
    let (s, c) = phase.sin_cos();
    C64::new(c, s)
}

/// Eigen-decomposition of a Hermitian matrix with eigenvalues sorted in
/// descending order. Eigenvectors are the matching columns.
pub fn hermitian_eig_desc(m: &CMat) -> (Vec<f64>, CMat) {
    let n = m.nrows();
    // symmetrize against round-off before handing to the solver
    let sym = (m + m.adjoint()).scale(0.5);
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = CMat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Eigenvalues and (unit-norm) right eigenvectors of a general complex
/// square matrix, via a complex Schur form and back substitution on the
/// triangular factor.
pub fn eig_general(m: &CMat) -> Result<(Vec<C64>, CMat)> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::Dimension(format!("eig of {}x{} matrix", n, m.ncols())));
    }
    if n == 0 {
        return Ok((Vec::new(), CMat::zeros(0, 0)));
    }
    let schur = Schur::try_new(m.clone(), 1e-15, 10_000)
        .ok_or_else(|| Error::Numeric("Schur iteration did not converge".into()))?;
    let (q, t) = schur.unpack();
    let scale = t.iter().map(|z| z.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let floor = 1e-14 * scale;

    let values: Vec<C64> = (0..n).map(|i| t[(i, i)]).collect();
    let mut vecs = CMat::zeros(n, n);
    for k in 0..n {
        let mut x = CVec::zeros(n);
        x[k] = C64::new(1.0, 0.0);
        for j in (0..k).rev() {
            let mut acc = C64::new(0.0, 0.0);
            for l in (j + 1)..=k {
                acc += t[(j, l)] * x[l];
            }
            let mut denom = t[(j, j)] - values[k];
            if denom.norm() < floor {
                // repeated eigenvalue; nudge to keep the vector finite
                denom = C64::new(floor, 0.0);
            }
            x[j] = -acc / denom;
        }
        let v = &q * x;
        let norm = v.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Numeric("eigenvector back substitution failed".into()));
        }
        vecs.set_column(k, &v.unscale(norm));
    }
    Ok((values, vecs))
}

/// Thin SVD `(U, s, V)` with `s` descending. nalgebra's complex SVD can
/// return an inaccurate factorization when singular values cluster, which
/// is the normal case for ESPRIT shift matrices, so this goes through faer.
fn thin_svd(m: &CMat) -> (CMat, Vec<f64>, CMat) {
    let (r, c) = m.shape();
    let fm = faer::Mat::<C64>::from_fn(r, c, |i, j| m[(i, j)]);
    let k = r.min(c);
    match fm.thin_svd() {
        Ok(svd) => {
            let u = CMat::from_fn(r, k, |i, j| svd.U()[(i, j)]);
            let v = CMat::from_fn(c, k, |i, j| svd.V()[(i, j)]);
            let s = svd.S().column_vector().iter().map(|z| z.re).collect();
            (u, s, v)
        }
        // non-finite input; callers see NaNs rather than a panic
        Err(_) => (CMat::from_element(r, k, C64::new(f64::NAN, 0.0)), vec![f64::NAN; k], CMat::from_element(c, k, C64::new(f64::NAN, 0.0))),
    }
}

/// Moore-Penrose pseudoinverse with relative singular-value cutoff `rtol`.
pub fn pinv(m: &CMat, rtol: f64) -> CMat {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return CMat::zeros(c, r);
    }
    let (u, s, v) = thin_svd(m);
    let cutoff = rtol * s.first().copied().unwrap_or(0.0);
    let mut out = CMat::zeros(c, r);
    for (i, &si) in s.iter().enumerate() {
        if si > cutoff && si > 0.0 {
            out += (v.column(i) * u.column(i).adjoint()).unscale(si);
        }
    }
    out
}

/// Singular values in descending order.
pub fn singular_values(m: &CMat) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    thin_svd(m).1
}

/// Solves a square complex system, failing when the matrix is numerically
/// singular (reciprocal condition estimate below `rcond_min`).
pub fn solve_checked(a: &CMat, b: &CMat, rcond_min: f64) -> Result<CMat> {
    let s = singular_values(a);
    let smax = s.first().copied().unwrap_or(0.0);
    let smin = s.last().copied().unwrap_or(0.0);
    if smax == 0.0 || smin / smax < rcond_min {
        return Err(Error::RankDeficient(format!(
            "matrix is numerically singular (rcond {:.3e})",
            if smax == 0.0 { 0.0 } else { smin / smax }
        )));
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::RankDeficient("LU solve failed".into()))
}
