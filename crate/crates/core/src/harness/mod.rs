//! Experiment orchestration: CE metrics, the compared schemes, and the
//! per-realization pipeline shared by the sweep runner and the CLI.
//!
//! Designs run on whatever channel model the CSI mode provides (true or
//! estimated) and are always scored on the true channel.

mod plot;
mod sweep;

pub use plot::write_svg_plot;
pub use sweep::{
    derive_seed, emit_outputs, read_csv, run_ce_sweep, run_sweep, write_csv, Metric, ResultRow, ResultTable,
    SweptParam, SweepSpec, CSV_HEADER,
};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{sinr_and_se, true_models, ChannelState, EcsiModel};
use crate::em_basis::{element_pattern_weights, BasisSet, ElementPattern};
use crate::error::{Error, Result};
use crate::estimation::{default_plan, estimate_all, simulate_uplink_pilots, true_scsi, CeScheme, PilotAllocation};
use crate::linalg::{CMat, CVec};
use crate::precoder::{Init, Problem, RunOptions};
use crate::scenario::{build_geometry, sample_realization, ArrayGeometry, SystemConfig, Vec3};
use crate::wmmse::{run_wmmse_quantized, run_wmmse_with, PortGrid, SpatialUpdate, WmmseOutcome};
use crate::zf::run_zf_tridomain;

/// Reported in place of `-inf` when an estimate is exact.
pub const NMSE_FLOOR_DB: f64 = -200.0;

/// Downtilt of the tilted fixed pattern, degrees below broadside.
pub const DOWNTILT_DEG: f64 = 10.0;

/// `10 log10(err / truth)`, floored at [`NMSE_FLOOR_DB`].
pub fn nmse_db(err: f64, truth: f64) -> Result<f64> {
    if !(truth > 0.0) || !err.is_finite() {
        return Err(Error::Numeric(format!("NMSE with error {err} over truth energy {truth}")));
    }
    Ok((10.0 * (err / truth).log10()).max(NMSE_FLOOR_DB))
}

/// NMSE of recovered sCSI over matching `N_obs x G` matrices, in dB.
pub fn nmse_s(estimate: &[CMat], truth: &[CMat]) -> Result<f64> {
    if estimate.len() != truth.len() || estimate.iter().zip(truth).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::Dimension("NMSE-S inputs differ in shape".into()));
    }
    let err: f64 = estimate.iter().zip(truth).map(|(a, b)| (a - b).norm_squared()).sum();
    let energy: f64 = truth.iter().map(|b| b.norm_squared()).sum();
    nmse_db(err, energy)
}

/// NMSE of eCSI vectors indexed `[user][antenna][subcarrier]`, in dB.
pub fn nmse_e(estimate: &[Vec<Vec<CVec>>], truth: &[Vec<Vec<CVec>>]) -> Result<f64> {
    let (mut err, mut energy) = (0.0, 0.0);
    let mismatch = || Error::Dimension("NMSE-E inputs differ in shape".into());
    if estimate.len() != truth.len() {
        return Err(mismatch());
    }
    for (eu, tu) in estimate.iter().zip(truth) {
        if eu.len() != tu.len() {
            return Err(mismatch());
        }
        for (em, tm) in eu.iter().zip(tu) {
            if em.len() != tm.len() {
                return Err(mismatch());
            }
            for (a, b) in em.iter().zip(tm) {
                if a.len() != b.len() {
                    return Err(mismatch());
                }
                err += (a - b).norm_squared();
                energy += b.norm_squared();
            }
        }
    }
    nmse_db(err, energy)
}

/// eCSI of a model at every position and subcarrier, `[m][g]`.
pub fn ecsi_grid(model: &EcsiModel, positions: &[Vec3]) -> Vec<Vec<CVec>> {
    positions
        .iter()
        .map(|p| (0..model.num_subcarriers()).map(|g| model.ecsi_at(p, g)).collect())
        .collect()
}

/// Where a design's channel knowledge comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsiMode {
    Perfect,
    Estimated,
}

impl fmt::Display for CsiMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            CsiMode::Perfect => "perfect",
            CsiMode::Estimated => "estimated",
        })
    }
}

impl FromStr for CsiMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "perfect" => Ok(CsiMode::Perfect),
            "estimated" => Ok(CsiMode::Estimated),
            other => Err(format!("unknown CSI mode `{other}` (perfect | estimated)")),
        }
    }
}

/// Fixed patterns of the TFA and SMA baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FixedPattern {
    Downtilt,
    Tr38901,
    Isotropic,
}

impl FixedPattern {
    pub const ALL: [FixedPattern; 3] = [FixedPattern::Downtilt, FixedPattern::Tr38901, FixedPattern::Isotropic];

    fn element(self) -> ElementPattern {
        match self {
            FixedPattern::Downtilt => ElementPattern::Downtilt(DOWNTILT_DEG),
            FixedPattern::Tr38901 => ElementPattern::Tr38901,
            FixedPattern::Isotropic => ElementPattern::Isotropic,
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            FixedPattern::Downtilt => "downtilt",
            FixedPattern::Tr38901 => "38901",
            FixedPattern::Isotropic => "iso",
        }
    }
}

/// A compared transmission scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    SemraWmmse,
    SemraZf,
    /// Pattern-reconfigurable ZF design at the reference positions.
    Emra,
    /// SEMRA-WMMSE restricted to an `N x N` port grid per antenna.
    SemraWmmseDiscrete,
    /// Continuous SEMRA-WMMSE snapped to the nearest ports.
    SemraWmmseQuantized,
    Tfa(FixedPattern),
    Sma(FixedPattern),
}

impl Scheme {
    /// Fixed-pattern baselines are always designed on the true channel.
    pub fn perfect_only(self) -> bool {
        matches!(self, Scheme::Tfa(_) | Scheme::Sma(_))
    }

    /// CE pipeline that feeds this scheme under estimated CSI.
    pub fn ce_scheme(self) -> Option<CeScheme> {
        match self {
            Scheme::Emra => Some(CeScheme::Emra),
            Scheme::Tfa(_) | Scheme::Sma(_) => None,
            _ => Some(CeScheme::Semra),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Scheme::SemraWmmse => "SEMRA-WMMSE".to_string(),
            Scheme::SemraZf => "SEMRA-ZF".to_string(),
            Scheme::Emra => "EMRA".to_string(),
            Scheme::SemraWmmseDiscrete => "SEMRA-WMMSE-discrete".to_string(),
            Scheme::SemraWmmseQuantized => "SEMRA-WMMSE-quantized".to_string(),
            Scheme::Tfa(p) => format!("TFA-{}", p.suffix()),
            Scheme::Sma(p) => format!("SMA-{}", p.suffix()),
        };
        f.pad(&name)
    }
}

impl FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let fixed = |p: &str| FixedPattern::ALL.into_iter().find(|f| f.suffix() == p);
        match s {
            "SEMRA-WMMSE" => Ok(Scheme::SemraWmmse),
            "SEMRA-ZF" => Ok(Scheme::SemraZf),
            "EMRA" => Ok(Scheme::Emra),
            "SEMRA-WMMSE-discrete" => Ok(Scheme::SemraWmmseDiscrete),
            "SEMRA-WMMSE-quantized" => Ok(Scheme::SemraWmmseQuantized),
            "SMA" => Ok(Scheme::Sma(FixedPattern::Isotropic)),
            _ => {
                let parsed = if let Some(p) = s.strip_prefix("TFA-") {
                    fixed(p).map(Scheme::Tfa)
                } else if let Some(p) = s.strip_prefix("SMA-") {
                    fixed(p).map(Scheme::Sma)
                } else {
                    None
                };
                parsed.ok_or_else(|| format!("unknown scheme `{s}`"))
            }
        }
    }
}

/// Sampled realization with its true models and shared context.
pub struct Realization {
    pub config: SystemConfig,
    pub basis: BasisSet,
    pub geometry: ArrayGeometry,
    pub truth: Vec<EcsiModel>,
    seed: u64,
}

impl Realization {
    pub fn new(config: &SystemConfig, basis: BasisSet, seed: u64) -> Result<Self> {
        let geometry = build_geometry(config)?;
        let truth = true_models(&sample_realization(config, seed), &basis, config)?;
        Ok(Self {
            config: config.clone(),
            basis,
            geometry,
            truth,
            seed,
        })
    }
}

/// Output of one CE run.
#[derive(Debug, Clone)]
pub struct CeOutcome {
    pub models: Vec<EcsiModel>,
    pub nmse_s: f64,
    pub nmse_e: f64,
}

/// Runs a CE scheme on a realization. Pilot noise is seeded from the
/// realization seed and the scheme, so SEMRA and EMRA see independent draws.
pub fn run_ce(real: &Realization, scheme: CeScheme) -> Result<CeOutcome> {
    let config = &real.config;
    config.validate_for_ce()?;
    let plan = default_plan(scheme, config, &real.geometry)?;
    let mut rng = ChaCha8Rng::seed_from_u64(real.seed);
    rng.set_stream(match scheme {
        CeScheme::Semra => 1,
        CeScheme::Emra => 2,
    });
    let alloc = PilotAllocation::new(config, &mut rng);
    let obs = simulate_uplink_pilots(&real.truth, &plan, &alloc, config.ce_noise_var(), &mut rng);
    let est = estimate_all(&obs, &alloc, &plan, &real.basis, config)?;

    let scsi: Vec<CMat> = est.iter().map(|e| e.scsi.clone()).collect();
    let scsi_truth: Vec<CMat> = real.truth.iter().map(|m| true_scsi(m, &plan)).collect();
    let reference = &real.geometry.reference_positions;
    let q_hat: Vec<_> = est.iter().map(|e| ecsi_grid(&e.estimate.model, reference)).collect();
    let q: Vec<_> = real.truth.iter().map(|m| ecsi_grid(m, reference)).collect();
    Ok(CeOutcome {
        nmse_s: nmse_s(&scsi, &scsi_truth)?,
        nmse_e: nmse_e(&q_hat, &q)?,
        models: est.into_iter().map(|e| e.estimate.model).collect(),
    })
}

/// Final design of a scheme: what the transmitter would deploy.
#[derive(Debug, Clone)]
pub struct Design {
    pub w: Vec<CMat>,
    pub em: crate::opt::MaskedObliquePoint,
    pub positions: Vec<Vec3>,
}

impl From<WmmseOutcome> for Design {
    fn from(out: WmmseOutcome) -> Self {
        Design {
            w: out.state.w,
            em: out.state.em,
            positions: out.state.positions,
        }
    }
}

/// Sum SE per subcarrier (bps/Hz) of a design on the true channel.
pub fn score(real: &Realization, design: &Design) -> Result<f64> {
    let state = ChannelState::new(&real.truth, design.positions.clone(), design.em.clone())?;
    let report = sinr_and_se(state.channels(), &design.w, real.config.noise_var())?;
    Ok(report.per_subcarrier())
}

/// Designs a scheme on the given models. `ports` sizes the port grid of the
/// discrete and quantized variants.
pub fn design(real: &Realization, scheme: Scheme, models: &[EcsiModel], ports: usize) -> Result<Design> {
    let config = &real.config;
    let geometry = &real.geometry;
    let problem = Problem::new(models, geometry, config);
    let options = RunOptions::from_config(config);
    let reference = || Init::reference(geometry, config.num_basis);
    match scheme {
        Scheme::SemraWmmse => Ok(run_wmmse_with(&problem, reference(), &options, SpatialUpdate::Continuous)?.into()),
        Scheme::SemraZf | Scheme::Emra => {
            let options = if scheme == Scheme::Emra { options.frozen_positions() } else { options };
            let out = run_zf_tridomain(&problem, reference(), &options)?;
            Ok(Design {
                w: out.state.w,
                em: out.state.em,
                positions: out.state.positions,
            })
        }
        Scheme::SemraWmmseDiscrete => {
            let grid = PortGrid::new(geometry, ports)?;
            Ok(run_wmmse_with(&problem, reference(), &options, SpatialUpdate::Discrete(&grid))?.into())
        }
        Scheme::SemraWmmseQuantized => {
            let grid = PortGrid::new(geometry, ports)?;
            Ok(run_wmmse_quantized(&problem, reference(), &options, &grid)?.into())
        }
        Scheme::Tfa(pattern) => Ok(fixed_pattern(real, &problem, pattern, false)?.into()),
        Scheme::Sma(pattern) => Ok(fixed_pattern(real, &problem, pattern, true)?.into()),
    }
}

fn fixed_pattern(real: &Realization, problem: &Problem<'_>, pattern: FixedPattern, movable: bool) -> Result<WmmseOutcome> {
    let config = &real.config;
    let alpha = element_pattern_weights(&real.basis, pattern.element())?;
    let init = Init::with_pattern(&real.geometry, alpha.as_vector())?;
    let options = RunOptions::from_config(config).frozen_em().frozen_positions();
    let tfa = run_wmmse_with(problem, init.clone(), &options, SpatialUpdate::Frozen)?;
    if !movable {
        return Ok(tfa);
    }
    // start from the fixed-array optimum so movement can only help
    let init = Init {
        precoders: Some(tfa.state.w),
        ..init
    };
    let options = RunOptions::from_config(config).frozen_em();
    run_wmmse_with(problem, init, &options, SpatialUpdate::Continuous)
}

/// Per-realization evaluation of a set of schemes. CE runs at most once
/// per pipeline; failures are reported per scheme.
pub fn evaluate(
    real: &Realization,
    schemes: &[Scheme],
    modes: &[CsiMode],
    ports: usize,
) -> Vec<(Scheme, CsiMode, Result<f64>)> {
    let mut ce: Vec<(CeScheme, std::result::Result<Vec<EcsiModel>, String>)> = Vec::new();
    let mut out = Vec::new();
    for &scheme in schemes {
        for &mode in modes {
            let mode = if scheme.perfect_only() { CsiMode::Perfect } else { mode };
            if out.iter().any(|(s, m, _)| *s == scheme && *m == mode) {
                continue;
            }
            let result = match (mode, scheme.ce_scheme()) {
                (CsiMode::Estimated, Some(pipeline)) => {
                    if !ce.iter().any(|(p, _)| *p == pipeline) {
                        let models = run_ce(real, pipeline).map(|o| o.models).map_err(|e| e.to_string());
                        ce.push((pipeline, models));
                    }
                    let models = &ce.iter().find(|(p, _)| *p == pipeline).expect("cached").1;
                    match models {
                        Ok(models) => design(real, scheme, models, ports).and_then(|d| score(real, &d)),
                        Err(msg) => Err(Error::Estimation(msg.clone())),
                    }
                }
                _ => design(real, scheme, &real.truth, ports).and_then(|d| score(real, &d)),
            };
            out.push((scheme, mode, result));
        }
    }
    out
}
