//! Configuration, array geometry and random multipath scenarios.
//!
//! [`SystemConfig`] carries every physical and algorithmic constant. It is
//! read from a TOML key/value file (SI units, one key per field, unknown keys
//! rejected). Derived quantities such as the wavelength, the transmit power
//! budget and the noise variances are methods rather than stored fields, so
//! a configuration can never hold inconsistent values.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::C64;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Relative slack used when checking geometric inequalities that are met
/// with equality by the reference configuration.
const GEOM_SLACK: f64 = 1e-9;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    /// Carrier frequency in Hz.
    pub carrier_freq: f64,
    /// Optional explicit wavelength in m; must agree with `c / carrier_freq`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wavelength: Option<f64>,
    /// Subcarrier spacing in Hz.
    pub subcarrier_spacing: f64,
    pub num_subcarriers: usize,
    /// `[M_y, M_z]`.
    pub array_dims: [usize; 2],
    /// `[d_y, d_z]` in m.
    pub spacings: [f64; 2],
    pub num_users: usize,
    /// Number of spherical-harmonic basis functions (perfect square).
    pub num_basis: usize,
    /// Paths per user.
    pub num_paths: usize,
    /// RMS delay spread in s.
    pub rms_delay_spread: f64,
    pub snr_precoding_db: f64,
    pub snr_ce_db: f64,
    /// Maximum per-axis displacement in m.
    pub d_max: f64,
    /// Minimum inter-antenna separation in m.
    pub d_sep: f64,
    /// CE pilot slots (observation positions per antenna).
    pub num_slots: usize,
    /// Pilot subcarriers per user per slot.
    pub pilots_per_user: usize,
    /// Outer-iteration cap of the tri-domain designs.
    pub max_iterations: usize,
    /// Relative stopping tolerance of the outer loops.
    pub stop_tol: f64,
    pub rng_seed: u64,
}

impl Default for SystemConfig {
    /// Desk-scale defaults: 2.4 GHz, 30 kHz, G = 32, 4x4 UPA at half
    /// wavelength, three users, K = 100, six paths.
    fn default() -> Self {
        let fc = 2.4e9;
        let lambda = SPEED_OF_LIGHT / fc;
        let d = lambda / 2.0;
        let d_sep = lambda / 10.0;
        Self {
            carrier_freq: fc,
            wavelength: None,
            subcarrier_spacing: 30e3,
            num_subcarriers: 32,
            array_dims: [4, 4],
            spacings: [d, d],
            num_users: 3,
            num_basis: 100,
            num_paths: 6,
            rms_delay_spread: 100e-9,
            snr_precoding_db: 20.0,
            snr_ce_db: 20.0,
            d_max: (d - d_sep) / 2.0,
            d_sep,
            num_slots: 4,
            pilots_per_user: 10,
            max_iterations: 10,
            stop_tol: 1e-4,
            rng_seed: 1,
        }
    }
}

impl SystemConfig {
    /// Full-scale constants (G = 128, J = 30).
    pub fn full_scale() -> Self {
        Self {
            num_subcarriers: 128,
            pilots_per_user: 30,
            ..Self::default()
        }
    }

    pub fn lambda(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq
    }

    pub fn num_antennas(&self) -> usize {
        self.array_dims[0] * self.array_dims[1]
    }

    /// Frequency offset of subcarrier `g` (zero-based), `f_g = g * Δf`.
    pub fn subcarrier_freq(&self, g: usize) -> f64 {
        g as f64 * self.subcarrier_spacing
    }

    /// Total downlink power budget `P_T = G * 10^(SNR_P / 10)` at unit noise.
    pub fn total_power(&self) -> f64 {
        noise_vars_from_snr(self).total_power
    }

    pub fn noise_var(&self) -> f64 {
        noise_vars_from_snr(self).noise_var
    }

    pub fn ce_noise_var(&self) -> f64 {
        noise_vars_from_snr(self).ce_noise_var
    }

    /// Pilot comb spacing in subcarriers, `floor(G / J)`.
    pub fn pilot_spacing(&self) -> usize {
        self.num_subcarriers / self.pilots_per_user.max(1)
    }

    /// Largest delay the pilot comb resolves without wrapping.
    pub fn unambiguous_delay(&self) -> f64 {
        1.0 / (self.pilot_spacing() as f64 * self.subcarrier_spacing)
    }

    /// Sets both inter-element spacings to `d` and moves `D_max` with it,
    /// `D_max = (d - D_sep) / 2`.
    pub fn with_spacing(mut self, d: f64) -> Self {
        self.spacings = [d, d];
        self.d_max = (d - self.d_sep) / 2.0;
        self
    }

    /// Checks the model invariants, naming the first one violated.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let positive = [
            ("carrier_freq", self.carrier_freq),
            ("subcarrier_spacing", self.subcarrier_spacing),
            ("rms_delay_spread", self.rms_delay_spread),
            ("spacings[0]", self.spacings[0]),
            ("spacings[1]", self.spacings[1]),
            ("d_sep", self.d_sep),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be finite and positive, got {v}"));
            }
        }
        if !(self.d_max.is_finite() && self.d_max >= 0.0) {
            return bad(format!("d_max must be finite and non-negative, got {}", self.d_max));
        }
        if !self.snr_precoding_db.is_finite() || !self.snr_ce_db.is_finite() {
            return bad("SNR values must be finite".into());
        }
        if let Some(w) = self.wavelength {
            if ((w - self.lambda()) / self.lambda()).abs() > 1e-9 {
                return bad(format!("wavelength {w} disagrees with c / carrier_freq = {}", self.lambda()));
            }
        }
        for name_count in [
            ("num_subcarriers", self.num_subcarriers),
            ("array_dims[0]", self.array_dims[0]),
            ("array_dims[1]", self.array_dims[1]),
            ("num_users", self.num_users),
            ("num_basis", self.num_basis),
            ("num_paths", self.num_paths),
        ] {
            if name_count.1 == 0 {
                return bad(format!("{} must be at least 1", name_count.0));
            }
        }
        let root = (self.num_basis as f64).sqrt().round() as usize;
        if root * root != self.num_basis {
            return bad(format!("num_basis = {} is not a perfect square", self.num_basis));
        }
        for (axis, d) in ["d_y", "d_z"].iter().zip(self.spacings) {
            let need = 2.0 * self.d_max + self.d_sep;
            if d < need * (1.0 - GEOM_SLACK) {
                return bad(format!("{axis} = {d} violates {axis} >= 2 D_max + D_sep = {need}"));
            }
        }
        if self.num_users > self.num_antennas() {
            return bad(format!(
                "U = {} exceeds M = {} (zero-forcing needs U <= M)",
                self.num_users,
                self.num_antennas()
            ));
        }
        if self.pilots_per_user * self.num_users > self.num_subcarriers {
            return bad(format!(
                "J * U = {} exceeds G = {} (pilot combs do not fit)",
                self.pilots_per_user * self.num_users,
                self.num_subcarriers
            ));
        }
        if self.pilots_per_user <= self.num_paths {
            return bad(format!(
                "J = {} must exceed L = {} for the delay subspace to be identifiable",
                self.pilots_per_user, self.num_paths
            ));
        }
        if !(self.stop_tol.is_finite() && self.stop_tol >= 0.0) {
            return bad("stop_tol must be non-negative".into());
        }
        Ok(())
    }

    /// Additional invariants of the movement-aided CE schedule.
    pub fn validate_for_ce(&self) -> Result<()> {
        self.validate()?;
        let [dy, dz] = self.spacings;
        if ((dy - dz) / dy).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "CE schedule requires d_y = d_z, got {dy} and {dz}"
            )));
        }
        if self.d_max < dy / 4.0 * (1.0 - GEOM_SLACK) {
            return Err(Error::InvalidConfig(format!(
                "CE schedule requires D_max >= d / 4 = {}, got {}",
                dy / 4.0,
                self.d_max
            )));
        }
        if self.num_slots != 4 {
            return Err(Error::InvalidConfig(format!(
                "CE schedule uses N_s = 4 observation slots, got {}",
                self.num_slots
            )));
        }
        Ok(())
    }

    /// Parses a configuration from TOML text.
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Reads and validates a configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg = Self::from_toml_str(&text).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Noise and power levels implied by the configured SNRs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevels {
    pub noise_var: f64,
    pub total_power: f64,
    pub ce_noise_var: f64,
}

/// Downlink noise is fixed at unit variance and the power budget scales
/// with the subcarrier count, so a unit-gain channel sees `SNR_P` per
/// subcarrier; CE pilots carry unit power per resource element.
pub fn noise_vars_from_snr(config: &SystemConfig) -> NoiseLevels {
    NoiseLevels {
        noise_var: 1.0,
        total_power: config.num_subcarriers as f64 * 10f64.powf(config.snr_precoding_db / 10.0),
        ce_noise_var: 10f64.powf(-config.snr_ce_db / 10.0),
    }
}

/// Axis-aligned feasible box of one antenna inside the `x = 0` plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibleRegion {
    pub center: Vec3,
    pub half_width: f64,
}

impl FeasibleRegion {
    pub fn contains(&self, p: &Vec3) -> bool {
        let tol = 1e-12 * (1.0 + self.half_width);
        p.x == 0.0
            && (p.y - self.center.y).abs() <= self.half_width + tol
            && (p.z - self.center.z).abs() <= self.half_width + tol
    }
}

/// Reference UPA in the `y-z` plane, centred at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    pub dims: [usize; 2],
    pub spacings: [f64; 2],
    /// Antenna `m = m_y * M_z + m_z`.
    pub reference_positions: Vec<Vec3>,
    pub regions: Vec<FeasibleRegion>,
}

impl ArrayGeometry {
    pub fn num_antennas(&self) -> usize {
        self.reference_positions.len()
    }

    /// `(m_y, m_z)` grid coordinates of antenna `m`.
    pub fn grid_index(&self, m: usize) -> (usize, usize) {
        (m / self.dims[1], m % self.dims[1])
    }
}

pub fn build_geometry(config: &SystemConfig) -> Result<ArrayGeometry> {
    config.validate()?;
    let [my, mz] = config.array_dims;
    let [dy, dz] = config.spacings;
    let mut reference_positions = Vec::with_capacity(my * mz);
    for iy in 0..my {
        for iz in 0..mz {
            let y = (iy as f64 - (my as f64 - 1.0) / 2.0) * dy;
            let z = (iz as f64 - (mz as f64 - 1.0) / 2.0) * dz;
            reference_positions.push(Vec3::new(0.0, y, z));
        }
    }
    let regions = reference_positions
        .iter()
        .map(|&center| FeasibleRegion {
            center,
            half_width: config.d_max,
        })
        .collect();
    Ok(ArrayGeometry {
        dims: config.array_dims,
        spacings: config.spacings,
        reference_positions,
        regions,
    })
}

/// Multipath parameters of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub gains: Vec<C64>,
    /// Delays in s, ascending, first one zero.
    pub delays: Vec<f64>,
    /// `(θ, φ)` departure elevation / azimuth in rad.
    pub aod: Vec<(f64, f64)>,
    /// `(ϑ, φ_rx)` arrival elevation / azimuth in rad.
    pub aoa: Vec<(f64, f64)>,
    /// Receive pattern gain along each path.
    pub rx_gain: Vec<f64>,
    pub ue_position: Vec3,
}

impl PathSet {
    pub fn num_paths(&self) -> usize {
        self.gains.len()
    }
}

pub const ELEVATION_RANGE: (f64, f64) = (60.0 * PI / 180.0, 120.0 * PI / 180.0);
pub const AZIMUTH_RANGE: (f64, f64) = (-60.0 * PI / 180.0, 60.0 * PI / 180.0);

/// Draws one realization (all users) as a pure function of `(config, seed)`.
///
/// Delays are i.i.d. exponential with mean `σ_τ`, sorted and shifted so the
/// first path arrives at zero; path powers follow `exp(-τ/σ_τ)` and are
/// normalized to unit total power. Departure and arrival angles are uniform
/// over `θ ∈ [60°, 120°]`, `φ ∈ [-60°, 60°]`; the UE pattern is isotropic.
pub fn sample_realization(config: &SystemConfig, seed: u64) -> Vec<PathSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = Exp::new(1.0 / config.rms_delay_spread).expect("positive delay spread");
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    // keep well inside the comb's unambiguous range
    let delay_cap = 0.5 * config.unambiguous_delay();
    let l = config.num_paths;

    (0..config.num_users)
        .map(|_| {
            let mut delays: Vec<f64> = loop {
                let mut d: Vec<f64> = (0..l).map(|_| exp.sample(&mut rng)).collect();
                d.sort_by(f64::total_cmp);
                let first = d[0];
                d.iter_mut().for_each(|t| *t -= first);
                if d[l - 1] < delay_cap {
                    break d;
                }
            };
            delays[0] = 0.0;
            let mut gains: Vec<C64> = delays
                .iter()
                .map(|&tau| {
                    let sd = (0.5 * (-tau / config.rms_delay_spread).exp()).sqrt();
                    C64::new(sd * std_normal.sample(&mut rng), sd * std_normal.sample(&mut rng))
                })
                .collect();
            let power: f64 = gains.iter().map(|g| g.norm_sqr()).sum();
            let scale = power.sqrt();
            gains.iter_mut().for_each(|g| *g /= scale);
            let angle = |rng: &mut ChaCha8Rng| {
                (
                    rng.random_range(ELEVATION_RANGE.0..=ELEVATION_RANGE.1),
                    rng.random_range(AZIMUTH_RANGE.0..=AZIMUTH_RANGE.1),
                )
            };
            let aod: Vec<(f64, f64)> = (0..l).map(|_| angle(&mut rng)).collect();
            let aoa: Vec<(f64, f64)> = (0..l).map(|_| angle(&mut rng)).collect();
            let ue_position = Vec3::new(
                rng.random_range(20.0..100.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-10.0..10.0),
            );
            PathSet {
                gains,
                delays,
                aod,
                aoa,
                rx_gain: vec![1.0; l],
                ue_position,
            }
        })
        .collect()
}
