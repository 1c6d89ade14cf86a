//! Subspace kernels: MDL model order, 1D delay ESPRIT, smoothed 2D ESPRIT
//! and principal-branch angle inversion.
//!
//! All ESPRIT routines take data in the downlink convention, where a path
//! contributes `e^{-j2πτf}` across frequency and `e^{-j(2π/λ)k·p}` across
//! space. Rotational invariance is solved in the least-squares sense.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::{eig_general, hermitian_eig_desc, pinv, CMat, C64};

const PINV_RTOL: f64 = 1e-12;

/// Eigenvalues below this fraction of the largest count as round-off in MDL.
const MDL_FLOOR_REL: f64 = 1e-12;

/// Weight of `Ψ_z` in the combined matrix whose eigenvectors pair the two
/// axes. Any generic value works; an irrational one avoids accidental ties.
const PAIRING_MIX: f64 = 0.618_033_988_749_895;

/// Sample covariance `Y Yᴴ / N`.
pub fn sample_covariance(y: &CMat) -> CMat {
    let n = y.ncols().max(1) as f64;
    (y * y.adjoint()).unscale(n)
}

/// Wax–Kailath MDL score for `k` signals given descending eigenvalues of a
/// `p x p` sample covariance built from `n` snapshots:
///
/// ```text
/// MDL(k) = -n (p-k) ln( geo_mean(l_{k+1..p}) / arith_mean(l_{k+1..p}) )
///          + k (2p - k) ln(n) / 2
/// ```
pub fn mdl_score(eigenvalues: &[f64], k: usize, snapshots: usize) -> f64 {
    let p = eigenvalues.len();
    let tail = &eigenvalues[k..];
    let top = eigenvalues.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    // the eigensolver resolves small eigenvalues only to a few hundred ulps
    // of the largest; anything below that is indistinguishable from round-off
    let floor = top * MDL_FLOOR_REL;
    let m = tail.len() as f64;
    let log_geo = tail.iter().map(|&l| l.max(floor).ln()).sum::<f64>() / m;
    let arith = tail.iter().map(|&l| l.max(floor)).sum::<f64>() / m;
    let n = snapshots as f64;
    -n * m * (log_geo - arith.ln()) + 0.5 * (k * (2 * p - k)) as f64 * n.ln()
}

/// Model order minimizing the MDL score over `0..p`, where `p` is the row
/// count of `y`.
pub fn mdl_order(y: &CMat) -> usize {
    let p = y.nrows();
    if p == 0 || y.iter().all(|z| *z == C64::new(0.0, 0.0)) {
        log::warn!("MDL on an all-zero observation matrix; order 0");
        return 0;
    }
    let (values, _) = hermitian_eig_desc(&sample_covariance(y));
    mdl_order_from_eigenvalues(&values, y.ncols())
}

/// MDL order from descending covariance eigenvalues.
pub fn mdl_order_from_eigenvalues(values: &[f64], snapshots: usize) -> usize {
    (0..values.len())
        .map(|k| (k, mdl_score(values, k, snapshots)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map_or(0, |(k, _)| k)
}

/// MDL order of the spatially smoothed covariance, counting every
/// subarray shift of every snapshot.
pub fn spatial_mdl_order(x: &CMat, shape: &GridShape) -> Result<usize> {
    let cov = smoothed_covariance(x, shape)?;
    let (values, _) = hermitian_eig_desc(&cov);
    let [ny, nz] = shape.dims;
    let [sy, sz] = shape.subarray;
    let snapshots = (ny - sy + 1) * (nz - sz + 1) * x.ncols().max(1);
    Ok(mdl_order_from_eigenvalues(&values, snapshots))
}

/// Top-`l` eigenvectors of a Hermitian matrix.
fn signal_subspace(cov: &CMat, l: usize) -> CMat {
    let (_, vectors) = hermitian_eig_desc(cov);
    vectors.columns(0, l).into_owned()
}

/// Delays from the rows of `y` (pilots at uniform spacing `spacing_hz`,
/// observations as columns), sorted ascending.
///
/// Delays are wrapped to the comb period `P = 1/spacing_hz`, shifted down by
/// half a resolution cell `P/(2J)`: a zero delay estimated slightly negative
/// stays near zero instead of wrapping to `P`.
pub fn esprit_1d_delays(y: &CMat, order: usize, spacing_hz: f64) -> Result<Vec<f64>> {
    let j = y.nrows();
    if order == 0 || order >= j {
        return Err(Error::Estimation(format!("delay ESPRIT needs 1 <= L < J, got L = {order}, J = {j}")));
    }
    let es = signal_subspace(&sample_covariance(y), order);
    let period = 1.0 / spacing_hz;
    let shift = period / (2.0 * j as f64);
    let upper = es.rows(0, j - 1).into_owned();
    let lower = es.rows(1, j - 1).into_owned();
    let phi = pinv(&upper, PINV_RTOL) * lower;
    let (roots, _) = eig_general(&phi)?;
    let mut delays = roots
        .iter()
        .map(|z| {
            if !(z.norm() > 0.0 && z.re.is_finite() && z.im.is_finite()) {
                return Err(Error::Estimation(format!("degenerate delay rotation eigenvalue {z}")));
            }
            Ok((-z.arg() / (2.0 * PI * spacing_hz) + shift).rem_euclid(period) - shift)
        })
        .collect::<Result<Vec<f64>>>()?;
    delays.sort_by(f64::total_cmp);
    Ok(delays)
}

/// Shape of a rectangular sensor grid and the smoothing subarray.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    /// Grid size `(n_y, n_z)`; data rows are indexed `iy * n_z + iz`.
    pub dims: [usize; 2],
    /// Smoothing subarray size `(s_y, s_z)`.
    pub subarray: [usize; 2],
}

impl GridShape {
    /// Largest order the invariance equations of this shape can resolve.
    pub fn max_order(&self) -> usize {
        let [sy, sz] = self.subarray;
        ((sy - 1) * sz).min(sy * (sz - 1))
    }

    fn check(&self, rows: usize) -> Result<()> {
        let [ny, nz] = self.dims;
        let [sy, sz] = self.subarray;
        if ny * nz != rows {
            return Err(Error::Dimension(format!("{rows} data rows for a {ny}x{nz} grid")));
        }
        if sy < 2 || sz < 2 || sy > ny || sz > nz {
            return Err(Error::Dimension(format!("subarray {sy}x{sz} unusable on a {ny}x{nz} grid")));
        }
        Ok(())
    }
}

/// Spatially smoothed, forward-backward averaged covariance over all shifts
/// of the subarray.
pub fn smoothed_covariance(x: &CMat, shape: &GridShape) -> Result<CMat> {
    shape.check(x.nrows())?;
    let [ny, nz] = shape.dims;
    let [sy, sz] = shape.subarray;
    let size = sy * sz;
    let mut cov = CMat::zeros(size, size);
    let mut sub = CMat::zeros(size, x.ncols());
    for a in 0..=(ny - sy) {
        for b in 0..=(nz - sz) {
            for iy in 0..sy {
                for iz in 0..sz {
                    sub.set_row(iy * sz + iz, &x.row((iy + a) * nz + iz + b));
                }
            }
            cov += &sub * sub.adjoint();
        }
    }
    let count = ((ny - sy + 1) * (nz - sz + 1) * x.ncols().max(1)) as f64;
    let cov = cov.unscale(count);
    // forward-backward average: a uniform grid's steering vectors are
    // conjugate-symmetric under index reversal up to a phase
    let back = CMat::from_fn(size, size, |i, j| cov[(size - 1 - i, size - 1 - j)].conj());
    Ok((cov + back).scale(0.5))
}

fn select_rows(es: &CMat, rows: impl Iterator<Item = usize>) -> CMat {
    let rows: Vec<usize> = rows.collect();
    es.select_rows(rows.iter())
}

/// Paired phase increments `(ω_y, ω_z)` per step along each grid axis.
///
/// The shift-invariance matrices `Ψ_y`, `Ψ_z` share eigenvectors. They are
/// taken from the fixed combination `Ψ_y + c Ψ_z`, which stays diagonalizable
/// when two paths share a frequency on one axis; both frequencies are then
/// read from the diagonals of the transformed `Ψ_y` and `Ψ_z`.
pub fn esprit_2d(x: &CMat, order: usize, shape: &GridShape) -> Result<Vec<(f64, f64)>> {
    if order == 0 || order > shape.max_order() {
        return Err(Error::Estimation(format!(
            "2D ESPRIT order {order} outside 1..={}",
            shape.max_order()
        )));
    }
    let cov = smoothed_covariance(x, shape)?;
    let es = signal_subspace(&cov, order);
    let [sy, sz] = shape.subarray;
    let y1 = select_rows(&es, (0..sy - 1).flat_map(|iy| (0..sz).map(move |iz| iy * sz + iz)));
    let y2 = select_rows(&es, (1..sy).flat_map(|iy| (0..sz).map(move |iz| iy * sz + iz)));
    let z1 = select_rows(&es, (0..sy).flat_map(|iy| (0..sz - 1).map(move |iz| iy * sz + iz)));
    let z2 = select_rows(&es, (0..sy).flat_map(|iy| (1..sz).map(move |iz| iy * sz + iz)));
    let psi_y = pinv(&y1, PINV_RTOL) * y2;
    let psi_z = pinv(&z1, PINV_RTOL) * z2;
    let mixed = &psi_y + psi_z.scale(PAIRING_MIX);
    let (_, t) = eig_general(&mixed)?;
    let t_inv = t
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Estimation("defective pairing: eigenvector matrix is singular".into()))?;
    let dy = &t_inv * psi_y * &t;
    let dz = &t_inv * psi_z * &t;
    (0..order)
        .map(|i| {
            let (a, b) = (dy[(i, i)], dz[(i, i)]);
            if !(a.norm() > 0.0 && b.norm() > 0.0) {
                return Err(Error::Estimation(format!("pairing produced a zero rotation for component {i}")));
            }
            Ok((a.arg(), b.arg()))
        })
        .collect()
}

/// `(θ, φ)` from spatial frequencies `μ = κ sinθ sinφ`, `ν = -κ cosθ` on the
/// principal branches, with arguments clipped to their domains.
///
/// At the poles (`|ν| ≥ κ`) the azimuth is undefined and returned as 0.
pub fn recover_angles(mu: f64, nu: f64, kappa: f64) -> Result<(f64, f64)> {
    if !(kappa > 0.0 && mu.is_finite() && nu.is_finite()) {
        return Err(Error::Domain(format!("spatial frequencies ({mu}, {nu}) with κ = {kappa}")));
    }
    let c = (-nu / kappa).clamp(-1.0, 1.0);
    let theta = c.acos();
    let nu_c = -c * kappa;
    let radial = kappa * kappa - nu_c * nu_c;
    if radial <= 0.0 {
        return Ok((theta, 0.0));
    }
    let phi = (mu / radial.sqrt()).clamp(-1.0, 1.0).asin();
    Ok((theta, phi))
}
