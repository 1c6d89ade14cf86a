//! Movement-aided parametric channel estimation and the pattern-diversity
//! baseline.
//!
//! Both schemes follow the same pipeline per user:
//!
//! 1. stack the pilot observations into `Y_d` (pilots x observations),
//! 2. pick the model order by MDL and estimate delays by 1D ESPRIT,
//! 3. fit the delays to every observation and extrapolate to all `G`
//!    subcarriers,
//! 4. estimate departure angles by smoothed 2D ESPRIT on the observation grid,
//! 5. solve least squares for the position-independent gains `χ̂`.
//!
//! The result is an [`EcsiModel`], so eCSI can be assembled at any antenna
//! position. SEMRA observes a `2M_y x 2M_z` virtual grid by moving every
//! antenna through four offsets with one fixed pattern; EMRA stays on the
//! physical `M_y x M_z` grid and cycles through training patterns instead.
//!
//! Observations are stored in the uplink form `ỹ = h* + ñ`. The estimator
//! conjugates them once and works on `h` throughout.

pub mod subspace;

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::channel::EcsiModel;
use crate::em_basis::{build_omega, BasisSet};
use crate::error::{Error, Result};
use crate::linalg::{cis, pinv, singular_values, CMat, CVec, C64};
use crate::scenario::{ArrayGeometry, SystemConfig, Vec3};

pub use subspace::{esprit_1d_delays, esprit_2d, mdl_order, recover_angles, GridShape};

/// Relative singular-value cutoff of the least-squares fits.
const LS_RTOL: f64 = 1e-12;
/// Condition number above which the delay fit logs a warning.
const DELAY_COND_WARN: f64 = 1e8;
/// Relative singular value below which `Υ` counts as rank deficient.
const UPSILON_RCOND: f64 = 1e-10;

/// Observation offsets `(ψ_y, ψ_z)` of the four CE slots.
pub const SLOT_SIGNS: [(i32, i32); 4] = [(1, 1), (1, -1), (-1, 1), (-1, -1)];

/// Antenna positions visited during CE and their place on the virtual grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSchedule {
    /// `d / 4`.
    pub d_min: f64,
    /// Virtual spacing `d / 2`.
    pub d_v: f64,
    pub displacements: Vec<Vec3>,
    /// `[m][s]`.
    pub positions: Vec<Vec<Vec3>>,
    /// `(2M_y, 2M_z)`.
    pub virtual_dims: [usize; 2],
    /// `[m][s] -> (iy, iz)`.
    pub virtual_index: Vec<Vec<(usize, usize)>>,
    /// `[m][s]` offsets from the array center in units of `d_min`, exact.
    pub quarter_offsets: Vec<Vec<(i64, i64)>>,
}

impl ObservationSchedule {
    pub fn num_slots(&self) -> usize {
        self.displacements.len()
    }
}

pub fn build_schedule(config: &SystemConfig, geometry: &ArrayGeometry) -> Result<ObservationSchedule> {
    let [dy, dz] = geometry.spacings;
    if ((dy - dz) / dy).abs() > 1e-12 {
        return Err(Error::ScheduleInfeasible(format!("unequal spacings d_y = {dy}, d_z = {dz}")));
    }
    let d = dy;
    let d_min = d / 4.0;
    if config.d_max < d_min * (1.0 - 1e-9) {
        return Err(Error::ScheduleInfeasible(format!(
            "D_max = {} is below d / 4 = {d_min}",
            config.d_max
        )));
    }
    let [my, mz] = geometry.dims;
    let displacements: Vec<Vec3> = SLOT_SIGNS
        .iter()
        .map(|&(sy, sz)| Vec3::new(0.0, sy as f64 * d_min, sz as f64 * d_min))
        .collect();
    let mut positions = Vec::with_capacity(my * mz);
    let mut virtual_index = Vec::with_capacity(my * mz);
    let mut quarter_offsets = Vec::with_capacity(my * mz);
    for (m, center) in geometry.reference_positions.iter().enumerate() {
        let (iy, iz) = geometry.grid_index(m);
        let mut pos = Vec::with_capacity(4);
        let mut idx = Vec::with_capacity(4);
        let mut quarter = Vec::with_capacity(4);
        for (&(sy, sz), delta) in SLOT_SIGNS.iter().zip(&displacements) {
            let p = center + delta;
            if !geometry.regions[m].contains(&p) {
                return Err(Error::ScheduleInfeasible(format!("observation {p:?} leaves the region of antenna {m}")));
            }
            pos.push(p);
            idx.push((2 * iy + ((sy + 1) / 2) as usize, 2 * iz + ((sz + 1) / 2) as usize));
            // reference positions sit at (2i - (M - 1)) * 2 quarters from the center
            quarter.push((
                2 * (2 * iy as i64 - (my as i64 - 1)) + sy as i64,
                2 * (2 * iz as i64 - (mz as i64 - 1)) + sz as i64,
            ));
        }
        positions.push(pos);
        virtual_index.push(idx);
        quarter_offsets.push(quarter);
    }
    Ok(ObservationSchedule {
        d_min,
        d_v: d / 2.0,
        displacements,
        positions,
        virtual_dims: [2 * my, 2 * mz],
        virtual_index,
        quarter_offsets,
    })
}

/// Pilot combs and symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotAllocation {
    /// Comb spacing `Δg` in subcarriers.
    pub spacing: usize,
    /// `[u][j]` subcarrier indices `u + j Δg`.
    pub subcarriers: Vec<Vec<usize>>,
    /// `[u][s][j]` unit-modulus QPSK symbols.
    pub symbols: Vec<Vec<Vec<C64>>>,
}

impl PilotAllocation {
    pub fn new(config: &SystemConfig, rng: &mut impl Rng) -> Self {
        let spacing = config.pilot_spacing();
        let j = config.pilots_per_user;
        let subcarriers = (0..config.num_users)
            .map(|u| (0..j).map(|i| u + i * spacing).collect())
            .collect();
        let mut symbols = vec![vec![Vec::with_capacity(j); config.num_slots]; config.num_users];
        for slot in symbols.iter_mut().flatten() {
            for _ in 0..j {
                let k = rng.random_range(0..4) as f64;
                slot.push(cis(PI / 4.0 + k * PI / 2.0));
            }
        }
        Self { spacing, subcarriers, symbols }
    }

    pub fn pilot_count(&self, u: usize) -> usize {
        self.subcarriers[u].len() * self.symbols[u].len()
    }
}

/// Which CE scheme a plan implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CeScheme {
    /// Moving antennas, one fixed pattern, virtual grid.
    Semra,
    /// Fixed antennas, pattern diversity, physical grid.
    Emra,
}

/// Every observation of a CE scheme: where the antenna is, which pattern it
/// radiates, and which grid cell it samples.
///
/// Observation `o = m * N_s + s` is antenna `m` in slot `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPlan {
    pub scheme: CeScheme,
    pub num_slots: usize,
    pub positions: Vec<Vec3>,
    pub pattern_of: Vec<usize>,
    pub patterns: Vec<DVector<f64>>,
    pub cell_of: Vec<usize>,
    pub grid: GridShape,
    /// Grid spacing along both axes in m.
    pub grid_spacing: f64,
}

impl ObservationPlan {
    /// Virtual-array plan with the CE pattern `alpha_ce`.
    pub fn semra(schedule: &ObservationSchedule, alpha_ce: DVector<f64>) -> Result<Self> {
        check_unit(&alpha_ce)?;
        let [ny, nz] = schedule.virtual_dims;
        let ns = schedule.num_slots();
        let mut positions = Vec::new();
        let mut cell_of = Vec::new();
        for (pos, idx) in schedule.positions.iter().zip(&schedule.virtual_index) {
            positions.extend_from_slice(pos);
            cell_of.extend(idx.iter().map(|&(iy, iz)| iy * nz + iz));
        }
        Ok(Self {
            scheme: CeScheme::Semra,
            num_slots: ns,
            pattern_of: vec![0; positions.len()],
            positions,
            patterns: vec![alpha_ce],
            cell_of,
            grid: GridShape { dims: [ny, nz], subarray: [smoothing(ny, 2), smoothing(nz, 2)] },
            grid_spacing: schedule.d_v,
        })
    }

    /// Reference-array plan cycling through one training pattern per slot.
    pub fn emra(geometry: &ArrayGeometry, patterns: Vec<DVector<f64>>) -> Result<Self> {
        patterns.iter().try_for_each(check_unit)?;
        let [my, mz] = geometry.dims;
        let t = patterns.len();
        let mut positions = Vec::new();
        let mut pattern_of = Vec::new();
        let mut cell_of = Vec::new();
        for (m, p) in geometry.reference_positions.iter().enumerate() {
            for s in 0..t {
                positions.push(*p);
                pattern_of.push(s);
                cell_of.push(m);
            }
        }
        Ok(Self {
            scheme: CeScheme::Emra,
            num_slots: t,
            positions,
            pattern_of,
            patterns,
            cell_of,
            grid: GridShape { dims: [my, mz], subarray: [smoothing(my, 1), smoothing(mz, 1)] },
            grid_spacing: geometry.spacings[0],
        })
    }

    pub fn num_observations(&self) -> usize {
        self.positions.len()
    }

    pub fn pattern(&self, o: usize) -> &DVector<f64> {
        &self.patterns[self.pattern_of[o]]
    }

    /// Rows are grid cells, columns are `(slot pattern, subcarrier)` snapshots.
    fn spatial_data(&self, scsi: &CMat) -> CMat {
        let g = scsi.ncols();
        let cells = self.grid.dims[0] * self.grid.dims[1];
        let t = self.patterns.len();
        let mut x = CMat::zeros(cells, t * g);
        for o in 0..self.num_observations() {
            let col0 = self.pattern_of[o] * g;
            for k in 0..g {
                x[(self.cell_of[o], col0 + k)] = scsi[(o, k)];
            }
        }
        x
    }
}

/// Smoothing subarray length: `shrink` shorter than the grid, keeping at
/// least two elements where the grid allows.
fn smoothing(n: usize, shrink: usize) -> usize {
    n.saturating_sub(shrink).max(n.min(2))
}

fn check_unit(alpha: &DVector<f64>) -> Result<()> {
    if (alpha.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::DegeneratePattern(format!("CE pattern has norm {}", alpha.norm())));
    }
    Ok(())
}

/// EMRA training set: the first `t` unit basis vectors.
pub fn training_patterns(num_basis: usize, t: usize) -> Vec<DVector<f64>> {
    (0..t.min(num_basis)).map(|k| DVector::from_fn(num_basis, |i, _| if i == k { 1.0 } else { 0.0 })).collect()
}

/// Pilot-normalized uplink observations.
#[derive(Debug, Clone, PartialEq)]
pub struct CeObservations {
    /// `[u]`, each `J x N_obs` with `ỹ = h* + ñ`.
    pub y: Vec<CMat>,
    pub noise_var: f64,
}

impl CeObservations {
    /// `ỹ_{u,m,g_j}^{(s)}`.
    pub fn get(&self, u: usize, m: usize, j: usize, s: usize, num_slots: usize) -> C64 {
        self.y[u][(j, m * num_slots + s)]
    }
}

fn complex_normal(rng: &mut impl Rng, var: f64) -> C64 {
    let s = (var / 2.0).sqrt();
    let a: f64 = StandardNormal.sample(rng);
    let b: f64 = StandardNormal.sample(rng);
    C64::new(s * a, s * b)
}

/// Uplink pilots `y = h* s + n`, divided by `s`. The channel is the true
/// model evaluated at each observation's position and pattern.
pub fn simulate_uplink_pilots(
    models: &[EcsiModel],
    plan: &ObservationPlan,
    alloc: &PilotAllocation,
    noise_var: f64,
    rng: &mut impl Rng,
) -> CeObservations {
    let y = models
        .iter()
        .enumerate()
        .map(|(u, model)| {
            let comb = &alloc.subcarriers[u];
            let mut y = CMat::zeros(comb.len(), plan.num_observations());
            for o in 0..plan.num_observations() {
                let slot = o % plan.num_slots;
                for (j, &g) in comb.iter().enumerate() {
                    let s = alloc.symbols[u][slot][j];
                    let h = model.h_at(plan.pattern(o), &plan.positions[o], g);
                    let raw = h.conj() * s + complex_normal(rng, noise_var);
                    y[(j, o)] = raw / s;
                }
            }
            y
        })
        .collect();
    CeObservations { y, noise_var }
}

/// Estimated parametric channel of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricEstimate {
    /// Delays in s from the delay stage. Their count is the delay-stage
    /// order, which can be lower than the number of angle-resolved paths.
    pub delays: Vec<f64>,
    /// Angles, `Ω̂` and `χ̂` in the form used by the precoders.
    pub model: EcsiModel,
}

impl ParametricEstimate {
    pub fn num_paths(&self) -> usize {
        self.model.num_paths()
    }

    /// Plain-text record: `delay` lines in ns, `path` lines with angles in
    /// degrees, then one `chi` line per subcarrier and path.
    pub fn write_record(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "# delays {} paths {}", self.delays.len(), self.num_paths())?;
        for (i, &tau) in self.delays.iter().enumerate() {
            writeln!(out, "delay {i} {:.6}", tau * 1e9)?;
        }
        writeln!(out, "# path index theta_deg phi_deg")?;
        for (i, &(theta, phi)) in self.model.aod.iter().enumerate() {
            writeln!(out, "path {i} {:.6} {:.6}", theta.to_degrees(), phi.to_degrees())?;
        }
        writeln!(out, "# chi subcarrier path re im")?;
        for (g, chi) in self.model.chi.iter().enumerate() {
            for (i, z) in chi.iter().enumerate() {
                writeln!(out, "chi {g} {i} {:.12e} {:.12e}", z.re, z.im)?;
            }
        }
        Ok(())
    }
}

/// Delay-domain least squares: fits every column of `y` (pilots on
/// subcarriers `comb`) onto the delay exponentials and evaluates the fit on
/// all `num_subcarriers`. Returns `N_obs x G`.
pub fn recover_scsi_fullband(
    y: &CMat,
    comb: &[usize],
    delays: &[f64],
    num_subcarriers: usize,
    subcarrier_spacing: f64,
) -> CMat {
    let vandermonde = |rows: &mut dyn Iterator<Item = usize>| {
        let rows: Vec<usize> = rows.collect();
        CMat::from_fn(rows.len(), delays.len(), |r, i| {
            cis(-2.0 * PI * delays[i] * rows[r] as f64 * subcarrier_spacing)
        })
    };
    let e = vandermonde(&mut comb.iter().copied());
    let sv = singular_values(&e);
    if let (Some(&hi), Some(&lo)) = (sv.first(), sv.last()) {
        if lo == 0.0 || hi / lo > DELAY_COND_WARN {
            log::warn!("delay Vandermonde is ill-conditioned (cond {:.3e})", hi / lo);
        }
    }
    let coeffs = pinv(&e, LS_RTOL) * y;
    let full = vandermonde(&mut (0..num_subcarriers));
    (full * coeffs).transpose()
}

/// `Υ`: row `o`, column `i` is `e^{+j(2π/λ)k̂_i·p_o} (Ω̂ α_o)_i`.
pub fn measurement_matrix(plan: &ObservationPlan, directions: &[Vec3], omega: &DMatrix<f64>, wavelength: f64) -> CMat {
    let gains: Vec<DVector<f64>> = plan.patterns.iter().map(|a| omega * a).collect();
    let c = 2.0 * PI / wavelength;
    CMat::from_fn(plan.num_observations(), directions.len(), |o, i| {
        cis(c * directions[i].dot(&plan.positions[o])) * gains[plan.pattern_of[o]][i]
    })
}

/// `χ̂_g = Υ⁺ ĥ*_g` for every subcarrier; `scsi` is `N_obs x G` in the
/// downlink convention.
pub fn ls_equivalent_gains(upsilon: &CMat, scsi: &CMat) -> Result<Vec<CVec>> {
    for i in 0..upsilon.ncols() {
        if upsilon.column(i).norm() <= f64::EPSILON * upsilon.norm() {
            return Err(Error::RankDeficient(format!("path {i} has zero CE-pattern response")));
        }
    }
    let sv = singular_values(upsilon);
    let (hi, lo) = (sv.first().copied().unwrap_or(0.0), sv.last().copied().unwrap_or(0.0));
    if upsilon.ncols() > upsilon.nrows() || !(lo > UPSILON_RCOND * hi) {
        let cols: Vec<CVec> = upsilon.column_iter().map(|c| c.normalize()).collect();
        let mut worst = (0, 1, 0.0);
        for a in 0..cols.len() {
            for b in (a + 1)..cols.len() {
                let overlap = cols[a].dotc(&cols[b]).norm();
                if overlap > worst.2 {
                    worst = (a, b, overlap);
                }
            }
        }
        return Err(Error::RankDeficient(format!(
            "Υ has rcond {:.3e}; paths {} and {} have near-identical steering (overlap {:.6})",
            if hi > 0.0 { lo / hi } else { 0.0 },
            worst.0,
            worst.1,
            worst.2
        )));
    }
    let ls = pinv(upsilon, LS_RTOL);
    let conj = scsi.map(|z| z.conj());
    Ok(conj.column_iter().map(|h| &ls * h).collect())
}

/// eCSI `q̂_{m,g}` at `positions`, indexed `[m][g]`.
pub fn assemble_ecsi(estimate: &ParametricEstimate, positions: &[Vec3]) -> Vec<Vec<CVec>> {
    positions
        .iter()
        .map(|p| (0..estimate.model.num_subcarriers()).map(|g| estimate.model.ecsi_at(p, g)).collect())
        .collect()
}

/// Estimate for one user plus the intermediate full-band sCSI.
#[derive(Debug, Clone, PartialEq)]
pub struct UserEstimate {
    pub estimate: ParametricEstimate,
    /// `N_obs x G` recovered sCSI at the observation positions.
    pub scsi: CMat,
    /// MDL orders of the delay and angle stages, before clamping.
    pub delay_order: usize,
    pub spatial_order: usize,
}

/// Full pipeline for one user's observations `y` (`J x N_obs`, uplink form).
pub fn estimate_user(
    y: &CMat,
    comb: &[usize],
    plan: &ObservationPlan,
    basis: &BasisSet,
    config: &SystemConfig,
) -> Result<UserEstimate> {
    if comb.len() < 2 || comb.windows(2).any(|w| w[1] - w[0] != comb[1] - comb[0]) {
        return Err(Error::Estimation("pilot comb must be uniform with at least two pilots".into()));
    }
    let h = y.map(|z| z.conj());
    let delay_order = mdl_order(&h);
    let pilot_step = (comb[1] - comb[0]) as f64 * config.subcarrier_spacing;
    let delays = esprit_1d_delays(&h, delay_order.clamp(1, comb.len() - 1), pilot_step)?;
    let scsi = recover_scsi_fullband(&h, comb, &delays, config.num_subcarriers, config.subcarrier_spacing);

    let lambda = config.lambda();
    let kappa = 2.0 * PI * plan.grid_spacing / lambda;
    // the angle stage sizes its subspace from the raw pilots, whose noise is
    // white across snapshots; delays closer than the pilot resolution would
    // otherwise cap it at the delay order
    let pilots = plan.spatial_data(&h.transpose());
    let spatial_order = subspace::spatial_mdl_order(&pilots, &plan.grid)?;
    let order = spatial_order.clamp(1, plan.grid.max_order().min(plan.num_observations()));
    let freqs = esprit_2d(&plan.spatial_data(&scsi), order, &plan.grid)?;
    // h advances by -μ per step in +y and by ν = -κ cosθ per step in +z
    let aod = freqs
        .iter()
        .map(|&(wy, wz)| recover_angles(-wy, wz, kappa))
        .collect::<Result<Vec<_>>>()?;

    let omega = build_omega(basis, &aod)?;
    let directions: Vec<Vec3> = aod.iter().map(|&(t, p)| crate::channel::direction_vector(t, p)).collect();
    let upsilon = measurement_matrix(plan, &directions, &omega, lambda);
    let chi = ls_equivalent_gains(&upsilon, &scsi)?;
    let model = EcsiModel::new(basis, aod, chi, lambda)?;
    Ok(UserEstimate {
        estimate: ParametricEstimate { delays, model },
        scsi,
        delay_order,
        spatial_order,
    })
}

/// Runs the pipeline for every user.
pub fn estimate_all(
    observations: &CeObservations,
    alloc: &PilotAllocation,
    plan: &ObservationPlan,
    basis: &BasisSet,
    config: &SystemConfig,
) -> Result<Vec<UserEstimate>> {
    observations
        .y
        .iter()
        .zip(&alloc.subcarriers)
        .map(|(y, comb)| estimate_user(y, comb, plan, basis, config))
        .collect()
}

/// True sCSI at a plan's observations, `N_obs x G`, for NMSE-S.
pub fn true_scsi(model: &EcsiModel, plan: &ObservationPlan) -> CMat {
    CMat::from_fn(plan.num_observations(), model.num_subcarriers(), |o, g| {
        model.h_at(plan.pattern(o), &plan.positions[o], g)
    })
}

/// Plan of the requested scheme with the default patterns: the isotropic
/// pattern for SEMRA, the first `N_s` unit basis vectors for EMRA.
pub fn default_plan(scheme: CeScheme, config: &SystemConfig, geometry: &ArrayGeometry) -> Result<ObservationPlan> {
    match scheme {
        CeScheme::Semra => {
            let schedule = build_schedule(config, geometry)?;
            let alpha_ce = training_patterns(config.num_basis, 1).remove(0);
            ObservationPlan::semra(&schedule, alpha_ce)
        }
        CeScheme::Emra => ObservationPlan::emra(geometry, training_patterns(config.num_basis, config.num_slots)),
    }
}
