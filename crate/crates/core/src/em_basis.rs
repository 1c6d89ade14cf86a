//! Real spherical-harmonic basis for reconfigurable radiation patterns.
//!
//! A transmit pattern is `f(θ, φ) = Σ_k α_k ω_k(θ, φ)` with `‖α‖₂ = 1`,
//! where `ω_k` are real spherical harmonics orthonormal under
//! `∫∫ ω_k ω_k' sinθ dθ dφ = δ_kk'`.
//!
//! Convention: index `k = ℓ² + ℓ + m'` enumerates `(ℓ, m')` lexicographically
//! with `m' = -ℓ..=ℓ`, and no Condon–Shortley phase is applied:
//!
//! ```text
//! ω_{ℓ,0}  = N_ℓ^0 P_ℓ(cosθ)
//! ω_{ℓ,m}  = √2 N_ℓ^m P_ℓ^m(cosθ) cos(mφ)     m > 0
//! ω_{ℓ,-m} = √2 N_ℓ^m P_ℓ^m(cosθ) sin(mφ)     m > 0
//! ```

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Ordered set of `K = (ℓ_max + 1)²` real spherical harmonics.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    max_degree: usize,
    index_map: Vec<(usize, i64)>,
}

impl BasisSet {
    pub fn new(num_basis: usize) -> Result<Self> {
        let root = (num_basis as f64).sqrt().round() as usize;
        if num_basis == 0 || root * root != num_basis {
            return Err(Error::InvalidConfig(format!(
                "basis size {num_basis} is not a nonzero perfect square"
            )));
        }
        let max_degree = root - 1;
        let index_map = (0..=max_degree)
            .flat_map(|l| (-(l as i64)..=l as i64).map(move |m| (l, m)))
            .collect();
        Ok(Self { max_degree, index_map })
    }

    pub fn len(&self) -> usize {
        self.index_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_map.is_empty()
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    /// `(ℓ, m')` of basis function `k` (zero-based).
    pub fn degree_order(&self, k: usize) -> (usize, i64) {
        self.index_map[k]
    }

    /// All `K` basis functions at `(θ, φ)`.
    pub fn eval(&self, theta: f64, phi: f64) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.len());
        self.eval_into(theta, phi, out.as_mut_slice())?;
        Ok(out)
    }

    pub fn eval_into(&self, theta: f64, phi: f64, out: &mut [f64]) -> Result<()> {
        if !(0.0..=PI).contains(&theta) {
            return Err(Error::Domain(format!("elevation θ = {theta} outside [0, π]")));
        }
        debug_assert_eq!(out.len(), self.len());
        let lmax = self.max_degree;
        let x = theta.cos();
        let s = theta.sin().max(0.0);
        let plm = normalized_legendre(lmax, x, s);
        let sqrt2 = std::f64::consts::SQRT_2;
        for l in 0..=lmax {
            let base = l * l + l;
            out[base] = plm[lm_index(l, 0)];
            for m in 1..=l {
                let p = sqrt2 * plm[lm_index(l, m)];
                let (sin_m, cos_m) = (m as f64 * phi).sin_cos();
                out[base + m] = p * cos_m;
                out[base - m] = p * sin_m;
            }
        }
        Ok(())
    }
}

#[inline]
fn lm_index(l: usize, m: usize) -> usize {
    l * (l + 1) / 2 + m
}

/// `N_ℓ^m P_ℓ^m(x)` for `0 ≤ m ≤ ℓ ≤ lmax`, with
/// `N_ℓ^m = sqrt((2ℓ+1)/(4π) (ℓ-m)!/(ℓ+m)!)`, via the standard stable
/// three-term recursion in `ℓ`.
fn normalized_legendre(lmax: usize, x: f64, s: f64) -> Vec<f64> {
    let mut p = vec![0.0; lm_index(lmax, lmax) + 1];
    p[0] = (1.0 / (4.0 * PI)).sqrt();
    for m in 1..=lmax {
        let mf = m as f64;
        p[lm_index(m, m)] = ((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * s * p[lm_index(m - 1, m - 1)];
    }
    for m in 0..lmax {
        p[lm_index(m + 1, m)] = (2.0 * m as f64 + 3.0).sqrt() * x * p[lm_index(m, m)];
    }
    for m in 0..=lmax {
        let mf = m as f64;
        for l in (m + 2)..=lmax {
            let lf = l as f64;
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0).powi(2) - mf * mf) / (4.0 * (lf - 1.0).powi(2) - 1.0)).sqrt();
            p[lm_index(l, m)] = a * (x * p[lm_index(l - 1, m)] - b * p[lm_index(l - 2, m)]);
        }
    }
    p
}

/// Unit-norm real pattern coefficient vector `α`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternWeights(DVector<f64>);

impl PatternWeights {
    /// Normalizes `raw` to unit ℓ₂ norm.
    pub fn new(raw: DVector<f64>) -> Result<Self> {
        let n = raw.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::DegeneratePattern("zero-norm pattern weights".into()));
        }
        Ok(Self(raw.unscale(n)))
    }

    /// `e_k` (zero-based), a single basis function.
    pub fn unit(num_basis: usize, k: usize) -> Self {
        let mut v = DVector::zeros(num_basis);
        v[k] = 1.0;
        Self(v)
    }

    /// The isotropic pattern `ω_{0,0}`.
    pub fn isotropic(num_basis: usize) -> Self {
        Self::unit(num_basis, 0)
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }
}

/// Rows are `eval_basis` at each departure angle.
pub fn build_omega(basis: &BasisSet, aod: &[(f64, f64)]) -> Result<DMatrix<f64>> {
    let k = basis.len();
    let mut omega = DMatrix::zeros(aod.len(), k);
    let mut row = vec![0.0; k];
    for (i, &(theta, phi)) in aod.iter().enumerate() {
        basis.eval_into(theta, phi, &mut row)?;
        for (c, v) in row.iter().enumerate() {
            omega[(i, c)] = *v;
        }
    }
    Ok(omega)
}

/// Signed directional gain `α · ω(θ, φ)`.
pub fn pattern_gain(basis: &BasisSet, alpha: &PatternWeights, theta: f64, phi: f64) -> Result<f64> {
    Ok(alpha.as_vector().dot(&basis.eval(theta, phi)?))
}

/// Tensor product rule: Gauss–Legendre in `cosθ`, uniform in `φ`.
#[derive(Debug, Clone)]
pub struct SphereQuadrature {
    /// `(θ, φ, weight)`; weights already include the `sinθ dθ dφ` measure.
    pub nodes: Vec<(f64, f64, f64)>,
}

impl SphereQuadrature {
    pub fn new(n_theta: usize, n_phi: usize) -> Self {
        let (xs, ws) = gauss_legendre(n_theta);
        let dphi = 2.0 * PI / n_phi as f64;
        let mut nodes = Vec::with_capacity(n_theta * n_phi);
        for (x, w) in xs.iter().zip(&ws) {
            let theta = x.clamp(-1.0, 1.0).acos();
            for j in 0..n_phi {
                nodes.push((theta, j as f64 * dphi, w * dphi));
            }
        }
        Self { nodes }
    }

    /// Smallest rule that integrates products of two basis functions of
    /// degree `≤ ℓ_max` exactly.
    pub fn for_degree(max_degree: usize) -> Self {
        let n = 2 * max_degree + 2;
        Self::new(n, 2 * n)
    }

    pub fn integrate(&self, mut f: impl FnMut(f64, f64) -> f64) -> f64 {
        self.nodes.iter().map(|&(t, p, w)| w * f(t, p)).sum()
    }

    /// Gram matrix `∫ ω_k ω_k' dΩ`.
    pub fn gram(&self, basis: &BasisSet) -> DMatrix<f64> {
        let k = basis.len();
        let mut g = DMatrix::zeros(k, k);
        let mut row = vec![0.0; k];
        for &(t, p, w) in &self.nodes {
            basis.eval_into(t, p, &mut row).expect("quadrature nodes lie in [0, π]");
            let v = DVector::from_column_slice(&row);
            g.ger(w, &v, &v, 1.0);
        }
        g
    }
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        xs[i] = x;
        ws[i] = w;
        xs[n - 1 - i] = -x;
        ws[n - 1 - i] = w;
    }
    (xs, ws)
}

/// Fixed element patterns used by the fixed-pattern baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementPattern {
    Isotropic,
    /// Single-element 38.901 pattern (65° beamwidths, 30 dB floor),
    /// boresight along `+x`.
    Tr38901,
    /// The same pattern tilted the given number of degrees below broadside.
    Downtilt(f64),
}

impl ElementPattern {
    /// Field amplitude (square root of the power pattern).
    pub fn amplitude(&self, theta: f64, phi: f64) -> f64 {
        match *self {
            ElementPattern::Isotropic => 1.0,
            ElementPattern::Tr38901 => tr38901_amplitude(theta, phi, 90.0),
            ElementPattern::Downtilt(deg) => tr38901_amplitude(theta, phi, 90.0 + deg),
        }
    }
}

fn tr38901_amplitude(theta: f64, phi: f64, boresight_deg: f64) -> f64 {
    let th = theta.to_degrees();
    // wrap azimuth to (-180, 180]
    let mut ph = phi.to_degrees() % 360.0;
    if ph > 180.0 {
        ph -= 360.0;
    } else if ph <= -180.0 {
        ph += 360.0;
    }
    let a_v = -(12.0 * ((th - boresight_deg) / 65.0).powi(2)).min(30.0);
    let a_h = -(12.0 * (ph / 65.0).powi(2)).min(30.0);
    let a_db = -(-(a_v + a_h)).min(30.0);
    10f64.powf(a_db / 20.0)
}

/// Result of projecting an analytic pattern onto the basis.
#[derive(Debug, Clone)]
pub struct Projection {
    pub weights: PatternWeights,
    /// `1 - ‖α_raw‖² / ‖f‖²`, the energy outside the span of the basis.
    pub residual_energy: f64,
}

/// `α_k = ∫ f ω_k dΩ`, normalized to unit norm.
pub fn project_pattern(
    basis: &BasisSet,
    quad: &SphereQuadrature,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Projection> {
    let k = basis.len();
    let mut raw = DVector::zeros(k);
    let mut row = vec![0.0; k];
    let mut energy = 0.0;
    for &(t, p, w) in &quad.nodes {
        let v = f(t, p);
        energy += w * v * v;
        basis.eval_into(t, p, &mut row)?;
        for (a, b) in raw.iter_mut().zip(&row) {
            *a += w * v * b;
        }
    }
    let captured = raw.norm_squared();
    if !(energy > 0.0) || captured <= 1e-300 {
        return Err(Error::DegeneratePattern("pattern has no energy in the basis span".into()));
    }
    Ok(Projection {
        weights: PatternWeights::new(raw)?,
        residual_energy: 1.0 - captured / energy,
    })
}

/// Projection of a named element pattern at the default 64 x 128 rule.
pub fn element_pattern_weights(basis: &BasisSet, pattern: ElementPattern) -> Result<PatternWeights> {
    if pattern == ElementPattern::Isotropic {
        return Ok(PatternWeights::isotropic(basis.len()));
    }
    let quad = SphereQuadrature::new(64, 128);
    Ok(project_pattern(basis, &quad, |t, p| pattern.amplitude(t, p))?.weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn basis() -> BasisSet {
        BasisSet::new(100).unwrap()
    }

    #[test]
    fn index_map_is_lexicographic() {
        let b = BasisSet::new(9).unwrap();
        let expect = [(0, 0), (1, -1), (1, 0), (1, 1), (2, -2), (2, -1), (2, 0), (2, 1), (2, 2)];
        for (k, e) in expect.iter().enumerate() {
            assert_eq!(b.degree_order(k), *e);
        }
        assert!(BasisSet::new(10).is_err());
        assert_eq!(basis().max_degree(), 9);
    }

    #[test]
    fn constant_harmonic() {
        let b = basis();
        for &(t, p) in &[(0.0, 0.0), (1.0, 2.0), (PI, -1.0)] {
            let v = b.eval(t, p).unwrap();
            assert!((v[0] - 0.282_094_791_773_878_1).abs() < 1e-15);
        }
    }

    #[test]
    fn cos_theta_factor_vanishes_at_equator() {
        let v = basis().eval(PI / 2.0, 0.0).unwrap();
        assert!(v[2].abs() < 1e-15);
        // every (ℓ, m') with ℓ + |m'| odd carries an odd power of cosθ
        let b = basis();
        for k in 0..b.len() {
            let (l, m) = b.degree_order(k);
            if (l + m.unsigned_abs() as usize) % 2 == 1 {
                assert!(v[k].abs() < 1e-14, "k={k} ({l},{m}) = {}", v[k]);
            }
        }
    }

    #[test]
    fn first_degree_closed_forms() {
        // ω_{1,-1} ∝ sinθ sinφ, ω_{1,0} ∝ cosθ, ω_{1,1} ∝ sinθ cosφ
        let c = (3.0 / (4.0 * PI)).sqrt();
        let (t, p) = (0.7, 1.3);
        let v = basis().eval(t, p).unwrap();
        assert!((v[1] - c * t.sin() * p.sin()).abs() < 1e-14);
        assert!((v[2] - c * t.cos()).abs() < 1e-14);
        assert!((v[3] - c * t.sin() * p.cos()).abs() < 1e-14);
    }

    #[test]
    fn rejects_elevation_outside_domain() {
        assert!(matches!(basis().eval(-0.1, 0.0), Err(Error::Domain(_))));
        assert!(matches!(basis().eval(PI + 1e-9, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn gram_is_identity_under_quadrature() {
        let b = basis();
        let g = SphereQuadrature::new(64, 128).gram(&b);
        let err = (g - DMatrix::identity(b.len(), b.len())).abs().max();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn minimal_rule_is_exact_too() {
        let b = basis();
        let g = SphereQuadrature::for_degree(b.max_degree()).gram(&b);
        assert!((g - DMatrix::identity(100, 100)).abs().max() < 1e-10);
    }

    #[test]
    fn finite_everywhere_with_bounded_slope() {
        let b = basis();
        let h = 1e-6;
        for i in 0..=60 {
            let t = PI * i as f64 / 60.0;
            for j in 0..24 {
                let p = 2.0 * PI * j as f64 / 24.0;
                let v = b.eval(t, p).unwrap();
                assert!(v.iter().all(|x| x.is_finite()));
                let (lo, hi) = ((t - h).max(0.0), (t + h).min(PI));
                let d = (b.eval(hi, p).unwrap() - b.eval(lo, p).unwrap()) / (hi - lo);
                // |dY/dθ| ≤ ℓ(ℓ+1)-ish bound times the max amplitude
                assert!(d.amax() < 200.0, "{}", d.amax());
            }
        }
    }

    #[test]
    fn omega_shapes() {
        let b = basis();
        assert_eq!(build_omega(&b, &[]).unwrap().shape(), (0, 100));
        let one = build_omega(&b, &[(1.0, 0.5)]).unwrap();
        assert_eq!(one.row(0).transpose(), b.eval(1.0, 0.5).unwrap());
        let two = build_omega(&b, &[(1.0, 0.5), (1.0, 0.5)]).unwrap();
        assert_eq!(two.row(0), two.row(1));
        assert!(build_omega(&b, &[(4.0, 0.0)]).is_err());
    }

    #[test]
    fn isotropic_gain_is_constant() {
        let b = basis();
        let a = PatternWeights::isotropic(100);
        for &(t, p) in &[(0.1, 0.0), (1.5, 2.0), (3.0, -2.0)] {
            assert!((pattern_gain(&b, &a, t, p).unwrap() - 0.5 / PI.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn unit_pattern_has_unit_energy() {
        let b = basis();
        let quad = SphereQuadrature::new(64, 128);
        let raw = DVector::from_fn(100, |i, _| ((i * 7919) % 13) as f64 - 6.0);
        let a = PatternWeights::new(raw).unwrap();
        let e = quad.integrate(|t, p| pattern_gain(&b, &a, t, p).unwrap().powi(2));
        assert!((e - 1.0).abs() < 1e-8, "{e}");
    }

    #[test]
    fn projection_reproduces_basis_members() {
        let b = basis();
        let quad = SphereQuadrature::new(64, 128);
        let iso = project_pattern(&b, &quad, |_, _| 1.0).unwrap();
        assert!((iso.weights.as_vector() - PatternWeights::isotropic(100).as_vector()).amax() < 1e-10);
        let w3 = project_pattern(&b, &quad, |t, p| b.eval(t, p).unwrap()[2]).unwrap();
        assert!((w3.weights.as_vector() - PatternWeights::unit(100, 2).as_vector()).amax() < 1e-10);
        assert!(w3.residual_energy.abs() < 1e-10);
    }

    #[test]
    fn projection_of_zero_pattern_fails() {
        let b = basis();
        let quad = SphereQuadrature::new(16, 32);
        assert!(matches!(project_pattern(&b, &quad, |_, _| 0.0), Err(Error::DegeneratePattern(_))));
    }

    #[test]
    fn tr38901_pattern_is_well_captured() {
        let b = basis();
        let quad = SphereQuadrature::new(64, 128);
        for pat in [ElementPattern::Tr38901, ElementPattern::Downtilt(10.0)] {
            let proj = project_pattern(&b, &quad, |t, p| pat.amplitude(t, p)).unwrap();
            assert!(proj.residual_energy < 0.05, "{pat:?}: {}", proj.residual_energy);
        }
        assert!((ElementPattern::Tr38901.amplitude(PI / 2.0, 0.0) - 1.0).abs() < 1e-15);
        // 30 dB front-to-back
        assert!((ElementPattern::Tr38901.amplitude(PI / 2.0, PI) - 10f64.powf(-1.5)).abs() < 1e-12);
        let tilt = ElementPattern::Downtilt(10.0);
        assert!((tilt.amplitude(100f64.to_radians(), 0.0) - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn gain_is_linear_in_weights(
            a in proptest::collection::vec(-1.0f64..1.0, 16),
            c in proptest::collection::vec(-1.0f64..1.0, 16),
            s in -2.0f64..2.0, r in -2.0f64..2.0,
            theta in 0.0f64..PI, phi in -PI..PI,
        ) {
            let b = BasisSet::new(16).unwrap();
            let w = b.eval(theta, phi).unwrap();
            let va = DVector::from_vec(a);
            let vc = DVector::from_vec(c);
            let lhs = (va.scale(s) + vc.scale(r)).dot(&w);
            let rhs = s * va.dot(&w) + r * vc.dot(&w);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
