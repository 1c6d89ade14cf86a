//! Numeric kernels shared by the alternating optimizers: the masked oblique
//! manifold of EM weights, Armijo backtracking, box projection onto the
//! antenna regions and a monotone bisection for the power multiplier.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::scenario::{FeasibleRegion, Vec3};

/// Block-diagonal EM precoding matrix `Λ` (KM x M) with unit-norm blocks.
///
/// Only the nonzero blocks are stored: column `m` of the compact K x M matrix
/// is `α_m`, which sits in rows `mK..(m+1)K` of the dense form.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedObliquePoint {
    alphas: DMatrix<f64>,
}

impl MaskedObliquePoint {
    /// Normalizes every column of `alphas`.
    pub fn new(mut alphas: DMatrix<f64>) -> Result<Self> {
        for (m, mut col) in alphas.column_iter_mut().enumerate() {
            let n = col.norm();
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::DegenerateRetraction { antenna: m });
            }
            col.unscale_mut(n);
        }
        Ok(Self { alphas })
    }

    /// Every antenna uses basis function `k`.
    pub fn uniform(num_basis: usize, num_antennas: usize, k: usize) -> Self {
        let mut alphas = DMatrix::zeros(num_basis, num_antennas);
        alphas.row_mut(k).fill(1.0);
        Self { alphas }
    }

    /// Every antenna uses the same unit-norm `alpha`.
    pub fn replicated(alpha: &nalgebra::DVector<f64>, num_antennas: usize) -> Result<Self> {
        Self::new(DMatrix::from_fn(alpha.len(), num_antennas, |k, _| alpha[k]))
    }

    pub fn num_basis(&self) -> usize {
        self.alphas.nrows()
    }

    pub fn num_antennas(&self) -> usize {
        self.alphas.ncols()
    }

    /// Compact K x M form.
    pub fn alphas(&self) -> &DMatrix<f64> {
        &self.alphas
    }

    pub fn alpha(&self, m: usize) -> nalgebra::DVectorView<'_, f64> {
        self.alphas.column(m)
    }

    /// Dense KM x M form.
    pub fn to_dense(&self) -> DMatrix<f64> {
        compact_to_dense(&self.alphas)
    }

    /// Inverse of [`to_dense`](Self::to_dense); fails if entries lie off the mask.
    pub fn from_dense(dense: &DMatrix<f64>, num_basis: usize) -> Result<Self> {
        let alphas = dense_to_compact(dense, num_basis)?;
        Self::new(alphas)
    }
}

pub fn compact_to_dense(c: &DMatrix<f64>) -> DMatrix<f64> {
    let (k, m) = c.shape();
    let mut d = DMatrix::zeros(k * m, m);
    for j in 0..m {
        d.view_mut((j * k, j), (k, 1)).copy_from(&c.column(j));
    }
    d
}

pub fn dense_to_compact(d: &DMatrix<f64>, num_basis: usize) -> Result<DMatrix<f64>> {
    let m = d.ncols();
    if d.nrows() != num_basis * m {
        return Err(Error::Dimension(format!(
            "dense EM matrix is {}x{}, expected {}x{m}",
            d.nrows(),
            m,
            num_basis * m
        )));
    }
    let mut c = DMatrix::zeros(num_basis, m);
    for j in 0..m {
        for i in 0..d.nrows() {
            if i / num_basis == j {
                c[(i % num_basis, j)] = d[(i, j)];
            } else if d[(i, j)] != 0.0 {
                return Err(Error::Dimension(format!("entry ({i}, {j}) lies outside the block mask")));
            }
        }
    }
    Ok(c)
}

/// Projects a (compact, already masked) Euclidean gradient onto the tangent
/// space: `G - Λ ddiag(Λᵀ G)`.
pub fn riemannian_grad(point: &MaskedObliquePoint, euclid: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = euclid.clone();
    for (m, mut col) in out.column_iter_mut().enumerate() {
        let a = point.alphas.column(m);
        let radial = a.dot(&col);
        col.axpy(-radial, &a, 1.0);
    }
    out
}

/// Column-wise normalization of `Λ + step·D`.
pub fn retract(point: &MaskedObliquePoint, step: f64, dir: &DMatrix<f64>) -> Result<MaskedObliquePoint> {
    MaskedObliquePoint::new(&point.alphas + dir * step)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmijoParams {
    pub initial_step: f64,
    pub shrink: f64,
    pub slope_coeff: f64,
    pub max_backtracks: usize,
}

impl ArmijoParams {
    pub const EM: Self = Self { initial_step: 1.0, shrink: 0.5, slope_coeff: 1e-4, max_backtracks: 30 };

    /// Position steps start at a tenth of a wavelength.
    pub fn position(wavelength: f64) -> Self {
        Self { initial_step: wavelength / 10.0, ..Self::EM }
    }
}

/// Outcome of a backtracking search; `step == 0` means nothing was accepted.
#[derive(Debug, Clone)]
pub struct ArmijoOutcome<P> {
    pub step: f64,
    pub value: f64,
    pub point: Option<P>,
}

/// Backtracking line search for a minimization objective.
///
/// `stepper(t)` builds the candidate at step `t` and `objective` evaluates it.
/// A candidate is accepted when `f ≤ base + c₁ t slope`. Non-finite or failing
/// candidates are treated as rejections.
pub fn armijo_search<P>(
    base_value: f64,
    slope: f64,
    params: &ArmijoParams,
    mut stepper: impl FnMut(f64) -> Result<P>,
    mut objective: impl FnMut(&P) -> f64,
) -> ArmijoOutcome<P> {
    let reject = ArmijoOutcome { step: 0.0, value: base_value, point: None };
    if !(slope < 0.0) || !base_value.is_finite() {
        return reject;
    }
    let mut t = params.initial_step;
    for _ in 0..=params.max_backtracks {
        if let Ok(cand) = stepper(t) {
            let f = objective(&cand);
            if f.is_finite() && f <= base_value + params.slope_coeff * t * slope {
                return ArmijoOutcome { step: t, value: f, point: Some(cand) };
            }
        }
        t *= params.shrink;
    }
    reject
}

/// Planar box projection: `x` is zeroed, `y`, `z` are clipped to the region.
pub fn box_project(candidate: &Vec3, region: &FeasibleRegion) -> Vec3 {
    let c = region.center;
    let d = region.half_width;
    Vec3::new(
        0.0,
        candidate.y.clamp(c.y - d, c.y + d),
        candidate.z.clamp(c.z - d, c.z + d),
    )
}

/// Root of a nonincreasing `f` with `f(0) > target`.
///
/// The upper bracket is found by doubling from 1. The returned `ν` is always
/// on the feasible side (`f(ν) ≤ target`) and stops as soon as
/// `|f(ν) - target| ≤ tol·target`, or when the bracket hits machine precision.
pub fn bisection_root(mut f: impl FnMut(f64) -> f64, target: f64, tol: f64) -> Result<f64> {
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut doublings = 0;
    while f(hi) > target {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 64 {
            return Err(Error::Numeric("bisection bracket not found within 64 doublings".into()));
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        let v = f(mid);
        if v > target {
            lo = mid;
        } else {
            hi = mid;
            if target - v <= tol * target {
                break;
            }
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_point(k: usize, m: usize, seed: u64) -> MaskedObliquePoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MaskedObliquePoint::new(DMatrix::from_fn(k, m, |_, _| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn dense_round_trip() {
        let p = random_point(4, 3, 1);
        let d = p.to_dense();
        assert_eq!(d.shape(), (12, 3));
        let gram = d.transpose() * &d;
        for m in 0..3 {
            assert!((gram[(m, m)] - 1.0).abs() < 1e-12);
        }
        assert_eq!(MaskedObliquePoint::from_dense(&d, 4).unwrap(), p);
        let mut bad = d.clone();
        bad[(0, 1)] = 1.0;
        assert!(MaskedObliquePoint::from_dense(&bad, 4).is_err());
    }

    #[test]
    fn radial_gradient_vanishes() {
        let p = random_point(5, 4, 2);
        assert!(riemannian_grad(&p, p.alphas()).amax() < 1e-14);
    }

    #[test]
    fn projection_matches_dense_formula_and_is_tangent() {
        let p = random_point(5, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = DMatrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let r = riemannian_grad(&p, &g);
        // dense oracle: G - Λ ddiag(Λᵀ G)
        let ld = p.to_dense();
        let gd = compact_to_dense(&g);
        let ddiag = DMatrix::from_diagonal(&(ld.transpose() * &gd).diagonal());
        let oracle = &gd - &ld * ddiag;
        assert!((compact_to_dense(&r) - &oracle).amax() < 1e-14);
        let tangency = (ld.transpose() * compact_to_dense(&r)).diagonal();
        assert!(tangency.amax() < 1e-12);
        // idempotent
        assert!((riemannian_grad(&p, &r) - &r).amax() < 1e-14);
    }

    #[test]
    fn retraction_basics() {
        let p = random_point(6, 3, 5);
        let d = DMatrix::from_element(6, 3, 0.3);
        assert_eq!(retract(&p, 0.0, &d).unwrap(), p);
        let one = MaskedObliquePoint::new(DMatrix::from_row_slice(1, 2, &[0.5, -2.0])).unwrap();
        let r = retract(&one, 1.0, &DMatrix::from_row_slice(1, 2, &[1.0, 0.1])).unwrap();
        assert_eq!(r.alphas()[(0, 0)], 1.0);
        assert_eq!(r.alphas()[(0, 1)], -1.0);
        let kill = -p.alphas().clone();
        assert!(matches!(retract(&p, 1.0, &kill), Err(Error::DegenerateRetraction { antenna: 0 })));
    }

    #[test]
    fn armijo_quadratic() {
        let out = armijo_search(1.0, -2.0, &ArmijoParams::EM, |t| Ok(1.0 - t), |x: &f64| x * x);
        assert_eq!(out.step, 1.0);
        assert_eq!(out.value, 0.0);
        let up = armijo_search(1.0, 2.0, &ArmijoParams::EM, |t| Ok(1.0 + t), |x: &f64| x * x);
        assert_eq!(up.step, 0.0);
        assert!(up.point.is_none());
    }

    #[test]
    fn box_projection() {
        let region = FeasibleRegion { center: Vec3::zeros(), half_width: 0.1 };
        let p = box_project(&Vec3::new(0.05, 0.3, -0.2), &region);
        assert_eq!(p, Vec3::new(0.0, 0.1, -0.1));
        let inside = Vec3::new(0.0, 0.02, -0.07);
        assert_eq!(box_project(&inside, &region), inside);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let region = FeasibleRegion { center: Vec3::new(0.0, 0.3, -0.1), half_width: 0.05 };
        for _ in 0..1000 {
            let x = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let once = box_project(&x, &region);
            assert_eq!(box_project(&once, &region), once);
            assert!(region.contains(&once));
        }
    }

    #[test]
    fn bisection_closed_forms() {
        let nu = bisection_root(|v| 4.0 / (1.0 + v).powi(2), 1.0, 1e-8).unwrap();
        assert!((nu - 1.0).abs() < 1e-7);
        let nu = bisection_root(|v| (-v).exp(), 0.5, 1e-8).unwrap();
        assert!((nu - 2f64.ln()).abs() < 1e-7);
        assert!(bisection_root(|_| 2.0, 1.0, 1e-8).is_err());
    }

    #[test]
    fn bisection_matches_eigen_space_power() {
        // P(ν) = Σ |z_i|²/(d_i + ν)² for a diagonal Ψ; the dense oracle
        // evaluates ‖(Ψ + νI)^{-1} z‖² with Ψ = Q diag(d) Qᵀ.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = DVector::from_fn(6, |_, _| rng.random_range(0.1..2.0));
        let z = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let q = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let psi = &q * DMatrix::from_diagonal(&d) * q.transpose();
        let zr = &q * &z;
        let dense = |nu: f64| {
            let a = &psi + DMatrix::identity(6, 6) * nu;
            a.lu().solve(&zr).unwrap().norm_squared()
        };
        let target = 0.25 * dense(0.0);
        let nu = bisection_root(|v| (0..6).map(|i| z[i] * z[i] / (d[i] + v).powi(2)).sum(), target, 1e-8)
            .unwrap();
        assert!(((dense(nu) - target) / target).abs() < 1e-7);
        assert!(dense(nu) <= target * (1.0 + 1e-12));
    }

    proptest! {
        #[test]
        fn armijo_never_worsens(a in 0.1f64..5.0, b in -3.0f64..3.0, c in -1.0f64..1.0, x0 in -2.0f64..2.0) {
            // f(x) = a x² + c sin(3x) + b x
            let f = |x: &f64| a * x * x + c * (3.0 * x).sin() + b * x;
            let df = 2.0 * a * x0 + 3.0 * c * (3.0 * x0).cos() + b;
            let dir = -df.signum();
            let out = armijo_search(f(&x0), -df.abs(), &ArmijoParams::EM, |t| Ok(x0 + t * dir), f);
            prop_assert!(out.value <= f(&x0));
        }

        #[test]
        fn retraction_stays_feasible(seed in 0u64..1000, step in -3.0f64..3.0) {
            let p = random_point(4, 3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let d = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
            if let Ok(r) = retract(&p, step, &d) {
                for m in 0..3 {
                    prop_assert!((r.alpha(m).norm() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
