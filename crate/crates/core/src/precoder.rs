//! Blocks shared by the ZF and WMMSE alternating optimizers.
//!
//! Both precoders minimize a real objective `F(h)` with the digital precoder
//! held fixed in the EM and spatial blocks. They only differ in `F` and in its
//! sensitivity `ξ = ∂F/∂h*`, so the two blocks here take both as closures.

use std::time::Duration;

use nalgebra::{DMatrix, DVector};

use crate::channel::{ChannelState, EcsiModel};
use crate::error::Result;
use crate::linalg::CMat;
use crate::opt::{armijo_search, box_project, retract, riemannian_grad, ArmijoParams, MaskedObliquePoint};
use crate::scenario::{ArrayGeometry, FeasibleRegion, SystemConfig, Vec3};

/// Everything an optimizer run needs besides its starting point.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub models: &'a [EcsiModel],
    pub regions: &'a [FeasibleRegion],
    pub total_power: f64,
    pub noise_var: f64,
}

impl<'a> Problem<'a> {
    pub fn new(models: &'a [EcsiModel], geometry: &'a ArrayGeometry, config: &SystemConfig) -> Self {
        Self {
            models,
            regions: &geometry.regions,
            total_power: config.total_power(),
            noise_var: config.noise_var(),
        }
    }
}

/// Starting EM weights and antenna positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Init {
    pub positions: Vec<Vec3>,
    pub em: MaskedObliquePoint,
    /// Starting digital precoders for the WMMSE design; MRT when absent.
    pub precoders: Option<Vec<CMat>>,
}

impl Init {
    /// Antennas at their reference positions with the isotropic pattern.
    pub fn reference(geometry: &ArrayGeometry, num_basis: usize) -> Self {
        Self {
            positions: geometry.reference_positions.clone(),
            em: MaskedObliquePoint::uniform(num_basis, geometry.num_antennas(), 0),
            precoders: None,
        }
    }

    /// Reference positions with one fixed pattern on every antenna.
    pub fn with_pattern(geometry: &ArrayGeometry, alpha: &DVector<f64>) -> Result<Self> {
        Ok(Self {
            positions: geometry.reference_positions.clone(),
            em: MaskedObliquePoint::replicated(alpha, geometry.num_antennas())?,
            precoders: None,
        })
    }
}

/// Which blocks of the alternation are active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub max_iterations: usize,
    pub tol: f64,
    pub optimize_em: bool,
    pub optimize_positions: bool,
}

impl RunOptions {
    pub fn from_config(config: &SystemConfig) -> Self {
        Self {
            max_iterations: config.max_iterations,
            tol: config.stop_tol,
            optimize_em: true,
            optimize_positions: true,
        }
    }

    pub fn frozen_positions(self) -> Self {
        Self { optimize_positions: false, ..self }
    }

    pub fn frozen_em(self) -> Self {
        Self { optimize_em: false, ..self }
    }
}

/// One outer iteration of an optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Objective being minimized (`-R` for ZF, `F_WMMSE` for WMMSE).
    pub objective: f64,
    /// Sum SE `R` in bits/s/Hz summed over subcarriers.
    pub sum_se: f64,
    /// Power multiplier of the last digital update (0 for ZF).
    pub nu: f64,
    pub em_time: Duration,
    pub spatial_time: Duration,
    pub digital_time: Duration,
}

/// Inner spatial loop limits.
pub const SPATIAL_INNER_TOL: f64 = 1e-4;
pub const SPATIAL_MAX_CYCLES: usize = 20;

/// One Riemannian steepest-descent step on the EM weights.
///
/// The direction is the negative Riemannian gradient. Returns the accepted
/// step (0 if none).
pub fn em_descent_step(
    state: &mut ChannelState<'_>,
    objective: impl Fn(&ChannelState<'_>) -> f64,
    sensitivity: impl Fn(&ChannelState<'_>) -> Vec<CMat>,
) -> Result<f64> {
    let base = objective(state);
    let egrad = state.pattern_gradient(&sensitivity(state));
    let rgrad = riemannian_grad(state.em(), &egrad);
    let norm = rgrad.norm();
    if !(norm > 1e-14) {
        return Ok(0.0);
    }
    let dir: DMatrix<f64> = -rgrad;
    let outcome = armijo_search(
        base,
        -norm * norm,
        &ArmijoParams::EM,
        |t| {
            let em = retract(state.em(), t, &dir)?;
            let mut cand = state.clone();
            cand.set_em(em);
            Ok(cand)
        },
        |c| objective(c),
    );
    if let Some(cand) = outcome.point {
        *state = cand;
    }
    Ok(outcome.step)
}

/// Projected descent direction for antenna `m`: the `x` component and any
/// component pushing against an active bound are removed.
pub fn projected_direction(grad: &Vec3, p: &Vec3, region: &FeasibleRegion) -> Vec3 {
    let mut d = -grad;
    d.x = 0.0;
    let eps = 1e-12 * region.half_width.max(f64::MIN_POSITIVE);
    for axis in 1..3 {
        let lo = region.center[axis] - region.half_width;
        let hi = region.center[axis] + region.half_width;
        if (p[axis] >= hi - eps && d[axis] > 0.0) || (p[axis] <= lo + eps && d[axis] < 0.0) {
            d[axis] = 0.0;
        }
    }
    d
}

/// Cyclic antenna-wise projected-gradient descent with Armijo steps.
///
/// Stops when a full cycle improves the objective by less than
/// `SPATIAL_INNER_TOL` relative, or after `SPATIAL_MAX_CYCLES` cycles.
/// Returns the number of cycles run.
pub fn spatial_descent_block(
    state: &mut ChannelState<'_>,
    regions: &[FeasibleRegion],
    objective: impl Fn(&ChannelState<'_>) -> f64,
    sensitivity: impl Fn(&ChannelState<'_>) -> Vec<CMat>,
) -> usize {
    let params = ArmijoParams::position(state.wavelength());
    let mut value = objective(state);
    for cycle in 1..=SPATIAL_MAX_CYCLES {
        let start = value;
        for (m, region) in regions.iter().enumerate() {
            let p = state.positions()[m];
            let grad = state.position_gradient(m, &sensitivity(state));
            let dir = projected_direction(&grad, &p, region);
            let norm = dir.norm();
            if !(norm > 0.0) {
                continue;
            }
            let unit = dir / norm;
            let outcome = armijo_search(
                value,
                -norm,
                &params,
                |t| {
                    let mut cand = state.clone();
                    cand.set_position(m, box_project(&(p + unit * t), region));
                    Ok(cand)
                },
                |c| objective(c),
            );
            if let Some(cand) = outcome.point {
                *state = cand;
                value = outcome.value;
            }
        }
        if (start - value) / start.abs().max(1.0) < SPATIAL_INNER_TOL {
            return cycle;
        }
    }
    SPATIAL_MAX_CYCLES
}

/// Frobenius energy of a precoder set.
pub fn total_energy(w: &[CMat]) -> f64 {
    w.iter().map(|w| w.norm_squared()).sum()
}
