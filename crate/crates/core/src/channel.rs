//! Channel synthesis from path parameters and the spectral-efficiency metric.
//!
//! Conventions (pinned by the tests below): with `b_i = e^{-j(2π/λ)k_i·p}`
//! and `χ` the position-independent path gains,
//!
//! ```text
//! q_{u,m,g} = Ωᵤᵀ Bᴴ χ_{u,g},     h_{u,m,g} = q_{u,m,g}ᴴ α_m,
//! h*_{u,m,g} = Σ_i (Ωᵤ α_m)_i χ_{u,g,i} e^{+j(2π/λ)k_i·p_m}.
//! ```
//!
//! [`ChannelState`] caches steering phases and per-path transmit gains so
//! that moving one antenna or changing one pattern only touches one row of
//! every `H_g`. It also turns objective sensitivities `∂F/∂h*` into pattern
//! and position gradients, which is the shared machinery of both precoders.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::em_basis::{build_omega, pattern_gain, BasisSet, PatternWeights};
use crate::error::{Error, Result};
use crate::linalg::{cis, CMat, CVec, C64};
use crate::opt::MaskedObliquePoint;
use crate::scenario::{PathSet, SystemConfig, Vec3};

/// Unit propagation direction for elevation `θ` and azimuth `φ`.
pub fn direction_vector(theta: f64, phi: f64) -> Vec3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vec3::new(st * cp, st * sp, ct)
}

/// `χ_{u,g}` for one user.
pub fn chi_vector(paths: &PathSet, g: usize, config: &SystemConfig) -> CVec {
    let lambda = config.lambda();
    let f = config.subcarrier_freq(g);
    CVec::from_iterator(
        paths.num_paths(),
        (0..paths.num_paths()).map(|i| {
            let (t, p) = paths.aoa[i];
            let k_rx = direction_vector(t, p);
            let rx_phase = -2.0 * PI / lambda * k_rx.dot(&paths.ue_position);
            let delay_phase = -2.0 * PI * paths.delays[i] * f;
            (paths.gains[i] * paths.rx_gain[i] * cis(rx_phase + delay_phase)).conj()
        }),
    )
}

/// Position-independent parametric channel of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct EcsiModel {
    pub wavelength: f64,
    pub aod: Vec<(f64, f64)>,
    pub directions: Vec<Vec3>,
    /// L x K, rows are the basis evaluated at each departure angle.
    pub omega: DMatrix<f64>,
    /// One L-vector per subcarrier.
    pub chi: Vec<CVec>,
}

impl EcsiModel {
    pub fn new(basis: &BasisSet, aod: Vec<(f64, f64)>, chi: Vec<CVec>, wavelength: f64) -> Result<Self> {
        if let Some(bad) = chi.iter().find(|c| c.len() != aod.len()) {
            return Err(Error::Dimension(format!(
                "χ has {} entries for {} paths",
                bad.len(),
                aod.len()
            )));
        }
        let omega = build_omega(basis, &aod)?;
        let directions = aod.iter().map(|&(t, p)| direction_vector(t, p)).collect();
        Ok(Self { wavelength, aod, directions, omega, chi })
    }

    /// Ground-truth model of one user.
    pub fn from_paths(paths: &PathSet, basis: &BasisSet, config: &SystemConfig) -> Result<Self> {
        let chi = (0..config.num_subcarriers).map(|g| chi_vector(paths, g, config)).collect();
        Self::new(basis, paths.aod.clone(), chi, config.lambda())
    }

    pub fn num_paths(&self) -> usize {
        self.aod.len()
    }

    pub fn num_subcarriers(&self) -> usize {
        self.chi.len()
    }

    /// `e^{+j(2π/λ)k_i·p}`, the conjugated steering phases `conj(b_i)`.
    pub fn steering_conj(&self, p: &Vec3) -> CVec {
        let c = 2.0 * PI / self.wavelength;
        CVec::from_iterator(self.directions.len(), self.directions.iter().map(|k| cis(c * k.dot(p))))
    }

    /// eCSI vector `q = Ωᵀ Bᴴ χ_g` at position `p`.
    pub fn ecsi_at(&self, p: &Vec3, g: usize) -> CVec {
        let v = self.steering_conj(p).component_mul(&self.chi[g]);
        self.omega.transpose().map(C64::from) * v
    }

    /// Per-path terms `h*_{i}` whose sum is `h*` at `(α, p, g)`.
    pub fn path_terms_conj(&self, alpha: &DVector<f64>, p: &Vec3, g: usize) -> CVec {
        let ftx = &self.omega * alpha;
        self.steering_conj(p)
            .component_mul(&self.chi[g])
            .zip_map(&ftx, |z, f| z * f)
    }

    /// `h = qᴴ α`.
    pub fn h_at(&self, alpha: &DVector<f64>, p: &Vec3, g: usize) -> C64 {
        self.path_terms_conj(alpha, p, g).sum().conj()
    }
}

/// Ground-truth models of all users.
pub fn true_models(users: &[PathSet], basis: &BasisSet, config: &SystemConfig) -> Result<Vec<EcsiModel>> {
    users.iter().map(|p| EcsiModel::from_paths(p, basis, config)).collect()
}

/// Direct per-path evaluation of the channel between antenna `(α, p)` and a user.
pub fn synthesize_h_direct(
    paths: &PathSet,
    basis: &BasisSet,
    alpha: &PatternWeights,
    p: &Vec3,
    g: usize,
    config: &SystemConfig,
) -> Result<C64> {
    let lambda = config.lambda();
    let f = config.subcarrier_freq(g);
    let mut h = C64::new(0.0, 0.0);
    for i in 0..paths.num_paths() {
        let (t, ph) = paths.aod[i];
        let (tr, pr) = paths.aoa[i];
        let k_tx = direction_vector(t, ph);
        let k_rx = direction_vector(tr, pr);
        let f_tx = pattern_gain(basis, alpha, t, ph)?;
        let tx_phase = -2.0 * PI / lambda * k_tx.dot(p);
        let rx_phase = -2.0 * PI / lambda * k_rx.dot(&paths.ue_position) - 2.0 * PI * paths.delays[i] * f;
        h += paths.gains[i] * paths.rx_gain[i] * f_tx * cis(tx_phase) * cis(rx_phase);
    }
    Ok(h)
}

/// Stacked eCSI form: `H_g`, `q̄_{u,g}` and the dense `Λ`.
#[derive(Debug, Clone)]
pub struct EffectiveChannelSet {
    /// Per subcarrier, M x U with column `u` equal to `h_{u,g}`.
    pub h: Vec<CMat>,
    /// `[u][g]`, MK-vectors stacking `q_{u,m,g}` over antennas.
    pub q: Vec<Vec<CVec>>,
    /// Dense KM x M EM matrix.
    pub lambda: DMatrix<f64>,
}

impl EffectiveChannelSet {
    pub fn assemble(models: &[EcsiModel], em: &MaskedObliquePoint, positions: &[Vec3]) -> Self {
        let m_ant = positions.len();
        let k = em.num_basis();
        let g_len = models.first().map_or(0, |m| m.num_subcarriers());
        let lambda = em.to_dense();
        let q: Vec<Vec<CVec>> = models
            .iter()
            .map(|model| {
                (0..g_len)
                    .map(|g| {
                        let mut stacked = CVec::zeros(m_ant * k);
                        for (m, p) in positions.iter().enumerate() {
                            stacked.rows_mut(m * k, k).copy_from(&model.ecsi_at(p, g));
                        }
                        stacked
                    })
                    .collect()
            })
            .collect();
        let lc = lambda.map(C64::from);
        let h = (0..g_len)
            .map(|g| {
                CMat::from_fn(m_ant, models.len(), |m, u| {
                    (q[u][g].adjoint() * lc.column(m))[(0, 0)]
                })
            })
            .collect();
        Self { h, q, lambda }
    }
}

/// Per-(user, subcarrier) SINR and spectral efficiency.
#[derive(Debug, Clone)]
pub struct SeReport {
    /// U x G.
    pub sinr: DMatrix<f64>,
    /// `Σ_g Σ_u log₂(1 + SINR)`.
    pub sum_se: f64,
}

impl SeReport {
    /// Sum SE averaged over subcarriers, the plotted quantity.
    pub fn per_subcarrier(&self) -> f64 {
        self.sum_se / self.sinr.ncols().max(1) as f64
    }
}

/// Coupling coefficients `C_g = H_gᴴ W_g`, entry `(u, ℓ) = h_uᴴ w_ℓ`.
pub fn couplings(h: &[CMat], w: &[CMat]) -> Vec<CMat> {
    h.iter().zip(w).map(|(h, w)| h.adjoint() * w).collect()
}

/// SINR of user `u` from its coupling row.
pub fn sinr_from_couplings(c: &CMat, u: usize, noise_var: f64) -> f64 {
    let signal = c[(u, u)].norm_sqr();
    let interference: f64 = (0..c.ncols()).filter(|&l| l != u).map(|l| c[(u, l)].norm_sqr()).sum();
    signal / (interference + noise_var)
}

pub fn sinr_and_se(h: &[CMat], w: &[CMat], noise_var: f64) -> Result<SeReport> {
    if !(noise_var > 0.0) {
        return Err(Error::InvalidConfig(format!("noise variance must be positive, got {noise_var}")));
    }
    if h.len() != w.len() {
        return Err(Error::Dimension(format!("{} channel sets vs {} precoders", h.len(), w.len())));
    }
    let u_len = h.first().map_or(0, |h| h.ncols());
    for (hg, wg) in h.iter().zip(w) {
        if wg.ncols() != u_len || hg.nrows() != wg.nrows() {
            return Err(Error::Dimension(format!(
                "precoder is {}x{}, channel is {}x{}",
                wg.nrows(),
                wg.ncols(),
                hg.nrows(),
                hg.ncols()
            )));
        }
    }
    let c = couplings(h, w);
    let sinr = DMatrix::from_fn(u_len, h.len(), |u, g| sinr_from_couplings(&c[g], u, noise_var));
    let sum_se = sinr.iter().map(|s| (1.0 + s).log2()).sum();
    Ok(SeReport { sinr, sum_se })
}

/// Cached channel state for a fixed set of user models.
#[derive(Debug, Clone)]
pub struct ChannelState<'a> {
    models: &'a [EcsiModel],
    positions: Vec<Vec3>,
    em: MaskedObliquePoint,
    /// `[u][m]`: steering phases `conj(b)` of user `u`'s paths at antenna `m`.
    steer: Vec<Vec<CVec>>,
    /// `[u][m]`: transmit pattern gains `Ωᵤ α_m` along user `u`'s paths.
    ftx: Vec<Vec<DVector<f64>>>,
    h: Vec<CMat>,
}

impl<'a> ChannelState<'a> {
    pub fn new(models: &'a [EcsiModel], positions: Vec<Vec3>, em: MaskedObliquePoint) -> Result<Self> {
        let Some(first) = models.first() else {
            return Err(Error::Dimension("no users".into()));
        };
        let g_len = first.num_subcarriers();
        if models.iter().any(|m| m.num_subcarriers() != g_len || m.omega.ncols() != em.num_basis()) {
            return Err(Error::Dimension("user models disagree on G or K".into()));
        }
        if positions.len() != em.num_antennas() {
            return Err(Error::Dimension(format!(
                "{} positions for {} EM columns",
                positions.len(),
                em.num_antennas()
            )));
        }
        let m_ant = positions.len();
        let steer = models.iter().map(|md| positions.iter().map(|p| md.steering_conj(p)).collect()).collect();
        let ftx = models
            .iter()
            .map(|md| (0..m_ant).map(|m| &md.omega * em.alpha(m)).collect())
            .collect();
        let mut s = Self {
            models,
            positions,
            em,
            steer,
            ftx,
            h: vec![CMat::zeros(m_ant, models.len()); g_len],
        };
        for m in 0..m_ant {
            s.refresh_row(m);
        }
        Ok(s)
    }

    fn refresh_row(&mut self, m: usize) {
        for (u, model) in self.models.iter().enumerate() {
            let sf = self.steer[u][m].zip_map(&self.ftx[u][m], |s, f| s * f);
            for (g, hg) in self.h.iter_mut().enumerate() {
                hg[(m, u)] = sf.dot(&model.chi[g]).conj();
            }
        }
    }

    pub fn models(&self) -> &'a [EcsiModel] {
        self.models
    }

    pub fn num_users(&self) -> usize {
        self.models.len()
    }

    pub fn num_antennas(&self) -> usize {
        self.positions.len()
    }

    pub fn num_subcarriers(&self) -> usize {
        self.h.len()
    }

    pub fn wavelength(&self) -> f64 {
        self.models[0].wavelength
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn em(&self) -> &MaskedObliquePoint {
        &self.em
    }

    /// `H_g` for all subcarriers (M x U each).
    pub fn channels(&self) -> &[CMat] {
        &self.h
    }

    pub fn set_position(&mut self, m: usize, p: Vec3) {
        self.positions[m] = p;
        for (u, model) in self.models.iter().enumerate() {
            self.steer[u][m] = model.steering_conj(&p);
        }
        self.refresh_row(m);
    }

    pub fn set_em(&mut self, em: MaskedObliquePoint) {
        self.em = em;
        for (u, model) in self.models.iter().enumerate() {
            for m in 0..self.positions.len() {
                self.ftx[u][m] = &model.omega * self.em.alpha(m);
            }
        }
        for m in 0..self.positions.len() {
            self.refresh_row(m);
        }
    }

    /// Euclidean gradient (compact K x M) of a real objective `F` w.r.t. the
    /// EM weights, given `ξ_g[(m, u)] = ∂F/∂h*_{u,m,g}`.
    pub fn pattern_gradient(&self, xi: &[CMat]) -> DMatrix<f64> {
        let k = self.em.num_basis();
        let mut grad = DMatrix::zeros(k, self.positions.len());
        for (u, model) in self.models.iter().enumerate() {
            for m in 0..self.positions.len() {
                let mut v = CVec::zeros(model.num_paths());
                for (g, xg) in xi.iter().enumerate() {
                    v.axpy(xg[(m, u)], &model.chi[g], C64::new(1.0, 0.0));
                }
                let re = v.component_mul(&self.steer[u][m]).map(|z| z.re);
                grad.column_mut(m).gemv_tr(2.0, &model.omega, &re, 1.0);
            }
        }
        grad
    }

    /// Gradient of `F` w.r.t. antenna `m`'s position, same `ξ` convention.
    pub fn position_gradient(&self, m: usize, xi: &[CMat]) -> Vec3 {
        let mut z = nalgebra::Vector3::<C64>::zeros();
        for (u, model) in self.models.iter().enumerate() {
            let sf = self.steer[u][m].zip_map(&self.ftx[u][m], |s, f| s * f);
            let mut acc = CVec::zeros(model.num_paths());
            for (g, xg) in xi.iter().enumerate() {
                acc.axpy(xg[(m, u)], &model.chi[g], C64::new(1.0, 0.0));
            }
            for (i, k) in model.directions.iter().enumerate() {
                let t = sf[i] * acc[i];
                z += k.map(C64::from) * t;
            }
        }
        z.map(|c| c.im) * (-4.0 * PI / self.wavelength())
    }
}
