//! WMMSE-based tri-domain optimization and the discrete-port variants.
//!
//! The objective is `F = Σ_{u,g} (ρ ε − ln ρ)`. Every block (receivers `β`,
//! weights `ρ`, digital precoders, EM weights, positions) minimizes `F` over
//! its own variables, so `F` never increases across block boundaries. With
//! `β` and `ρ` at their optima, `F = UG − ln2·R`.
//!
//! The digital update solves `(Ψ_g + νI) w_{u,g} = z_{u,g}` in user space:
//! with `Ψ_g = H C Hᴴ`, `C = diag(ρ|β|²)` and `Z = H diag(ρβ)`, the
//! push-through identity gives `W_g = H X` with `(C HᴴH + νI) X = diag(ρβ)`.
//! For `ν → 0⁺` this is the pseudoinverse solution whenever `HᴴH` is
//! invertible; otherwise the M-dimensional eigen-solve is used.

use std::time::Instant;

use nalgebra::DMatrix;

use crate::channel::{couplings, sinr_and_se, sinr_from_couplings, ChannelState};
use crate::error::{Error, Result};
use crate::linalg::{hermitian_eig_desc, CMat, CVec, C64};
use crate::opt::{bisection_root, MaskedObliquePoint};
use crate::precoder::{em_descent_step, spatial_descent_block, total_energy, Init, IterationRecord, Problem, RunOptions};
use crate::scenario::{ArrayGeometry, Vec3};

pub const INNER_TOL: f64 = 1e-6;
pub const INNER_MAX_PASSES: usize = 100;
pub const RHO_FLOOR: f64 = 1e-12;
pub const BISECTION_TOL: f64 = 1e-8;
/// Relative eigenvalue cutoff of the pseudoinverse fallback.
const PINV_RTOL: f64 = 1e-10;
/// Gram conditioning below which the user-space solve is not trusted.
const GRAM_RCOND: f64 = 1e-12;

/// Receive equalizers and MSE weights, both U x G.
#[derive(Debug, Clone, PartialEq)]
pub struct Auxiliaries {
    pub beta: DMatrix<C64>,
    pub rho: DMatrix<f64>,
}

impl Auxiliaries {
    /// MMSE receivers and their optimal weights for the given precoders.
    pub fn optimal(h: &[CMat], w: &[CMat], noise_var: f64) -> Result<Self> {
        let c = couplings(h, w);
        let (u_len, g_len) = (w.first().map_or(0, |w| w.ncols()), w.len());
        let mut beta = DMatrix::zeros(u_len, g_len);
        let mut rho = DMatrix::zeros(u_len, g_len);
        for (g, cg) in c.iter().enumerate() {
            for u in 0..u_len {
                beta[(u, g)] = update_beta(cg, u, noise_var)?;
                rho[(u, g)] = update_rho(cg, u, noise_var);
            }
        }
        Ok(Self { beta, rho })
    }
}

/// `ε = |1 − β* c_uu|² + |β|² Σ_{ℓ≠u} |c_uℓ|² + |β|² σ²`.
pub fn mse(c: &CMat, beta: C64, u: usize, noise_var: f64) -> f64 {
    let b2 = beta.norm_sqr();
    let distortion = (C64::new(1.0, 0.0) - beta.conj() * c[(u, u)]).norm_sqr();
    let interference: f64 = (0..c.ncols()).filter(|&l| l != u).map(|l| c[(u, l)].norm_sqr()).sum();
    distortion + b2 * interference + b2 * noise_var
}

/// MMSE receiver `β = c_uu / (Σ_ℓ |c_uℓ|² + σ²)`.
pub fn update_beta(c: &CMat, u: usize, noise_var: f64) -> Result<C64> {
    let denom: f64 = (0..c.ncols()).map(|l| c[(u, l)].norm_sqr()).sum::<f64>() + noise_var;
    if !(denom > 0.0) {
        return Err(Error::Numeric(format!("receiver of user {u} has a vanishing denominator")));
    }
    Ok(c[(u, u)] / denom)
}

/// `ρ = 1 + SINR`, which is `1/ε` at the MMSE receiver.
pub fn update_rho(c: &CMat, u: usize, noise_var: f64) -> f64 {
    (1.0 + sinr_from_couplings(c, u, noise_var)).max(RHO_FLOOR)
}

/// `F = Σ_{u,g} (ρ ε − ln ρ)`.
pub fn wmmse_objective(h: &[CMat], w: &[CMat], aux: &Auxiliaries, noise_var: f64) -> f64 {
    couplings(h, w)
        .iter()
        .enumerate()
        .map(|(g, c)| {
            (0..c.nrows())
                .map(|u| {
                    let rho = aux.rho[(u, g)];
                    rho * mse(c, aux.beta[(u, g)], u, noise_var) - rho.ln()
                })
                .sum::<f64>()
        })
        .sum()
}

/// Per-subcarrier solver for `(Ψ + νI)^{-1} Z`.
enum DigitalSolver {
    UserSpace {
        h: CMat,
        users: Vec<usize>,
        cg: CMat,
        gram: CMat,
        rhs: CMat,
    },
    AntennaSpace {
        vecs: CMat,
        vals: Vec<f64>,
        /// `Vᴴ Z` with components on the numerical null space removed.
        proj: CMat,
    },
    Zero,
}

impl DigitalSolver {
    fn new(h: &CMat, beta: &[C64], rho: &[f64]) -> Self {
        let users: Vec<usize> = (0..h.ncols()).filter(|&u| beta[u].norm_sqr() > 0.0).collect();
        if users.is_empty() {
            return Self::Zero;
        }
        let ha = CMat::from_fn(h.nrows(), users.len(), |m, j| h[(m, users[j])]);
        let gram = ha.adjoint() * &ha;
        let (eig, _) = hermitian_eig_desc(&gram);
        if users.len() <= h.nrows() && eig[users.len() - 1] > GRAM_RCOND * eig[0] {
            let c = DMatrix::from_fn(users.len(), users.len(), |i, j| {
                if i == j {
                    C64::from(rho[users[i]] * beta[users[i]].norm_sqr())
                } else {
                    C64::new(0.0, 0.0)
                }
            });
            let rhs = CMat::from_fn(users.len(), users.len(), |i, j| {
                if i == j {
                    beta[users[i]] * rho[users[i]]
                } else {
                    C64::new(0.0, 0.0)
                }
            });
            let cg = c * &gram;
            return Self::UserSpace { h: h.clone(), users, cg, gram, rhs };
        }
        let mut psi = CMat::zeros(h.nrows(), h.nrows());
        let mut z = CMat::zeros(h.nrows(), h.ncols());
        for &u in &users {
            let hu = h.column(u);
            psi += (&hu * hu.adjoint()) * C64::from(rho[u] * beta[u].norm_sqr());
            z.set_column(u, &(hu * (beta[u] * rho[u])));
        }
        Self::antenna_space(psi, z)
    }

    fn antenna_space(psi: CMat, z: CMat) -> Self {
        let (vals, vecs) = hermitian_eig_desc(&psi);
        let cutoff = PINV_RTOL * vals[0].max(0.0);
        let mut proj = vecs.adjoint() * z;
        for (i, v) in vals.iter().enumerate() {
            if !(*v > cutoff) {
                proj.row_mut(i).fill(C64::new(0.0, 0.0));
            }
        }
        Self::AntennaSpace { vecs, vals, proj }
    }

    fn user_space_x(cg: &CMat, rhs: &CMat, nu: f64) -> CMat {
        let n = cg.nrows();
        let a = cg + CMat::identity(n, n) * C64::from(nu);
        a.lu().solve(rhs).unwrap_or_else(|| CMat::from_element(n, n, C64::new(f64::INFINITY, 0.0)))
    }

    fn power(&self, nu: f64) -> f64 {
        match self {
            Self::UserSpace { cg, gram, rhs, .. } => {
                let x = Self::user_space_x(cg, rhs, nu);
                (x.adjoint() * gram * &x).trace().re
            }
            Self::AntennaSpace { vals, proj, .. } => proj
                .row_iter()
                .zip(vals)
                .filter(|(_, v)| **v + nu > 0.0)
                .map(|(r, v)| r.norm_squared() / (v + nu).powi(2))
                .sum(),
            Self::Zero => 0.0,
        }
    }

    fn precoder(&self, nu: f64, m: usize, u_len: usize) -> CMat {
        match self {
            Self::UserSpace { h, users, cg, rhs, .. } => {
                let x = Self::user_space_x(cg, rhs, nu);
                let ha = CMat::from_fn(h.nrows(), users.len(), |mm, j| h[(mm, users[j])]);
                let wa = ha * x;
                let mut w = CMat::zeros(m, u_len);
                for (j, &u) in users.iter().enumerate() {
                    w.set_column(u, &wa.column(j));
                }
                w
            }
            Self::AntennaSpace { vecs, vals, proj } => {
                let mut scaled = proj.clone();
                for (i, v) in vals.iter().enumerate() {
                    let d = if *v + nu > 0.0 { 1.0 / (v + nu) } else { 0.0 };
                    scaled.row_mut(i).scale_mut(d);
                }
                vecs * scaled
            }
            Self::Zero => CMat::zeros(m, u_len),
        }
    }
}

/// Closed-form digital update under the global power constraint; returns the
/// precoders and the multiplier `ν`.
pub fn update_digital(h: &[CMat], aux: &Auxiliaries, total_power: f64) -> Result<(Vec<CMat>, f64)> {
    let solvers: Vec<DigitalSolver> = h
        .iter()
        .enumerate()
        .map(|(g, hg)| {
            let beta: Vec<C64> = aux.beta.column(g).iter().copied().collect();
            let rho: Vec<f64> = aux.rho.column(g).iter().copied().collect();
            DigitalSolver::new(hg, &beta, &rho)
        })
        .collect();
    let power = |nu: f64| solvers.iter().map(|s| s.power(nu)).sum::<f64>();
    let p0 = power(0.0);
    let nu = if p0.is_finite() && p0 <= total_power {
        0.0
    } else {
        bisection_root(power, total_power, BISECTION_TOL)?
    };
    let w = solvers
        .iter()
        .zip(h)
        .map(|(s, hg)| s.precoder(nu, hg.nrows(), hg.ncols()))
        .collect();
    Ok((w, nu))
}

/// `(Ψ_g^† z)` in antenna space, used to cross-check the user-space limit.
pub fn pseudoinverse_precoder(h: &CMat, beta: &[C64], rho: &[f64]) -> CMat {
    let mut psi = CMat::zeros(h.nrows(), h.nrows());
    let mut z = CMat::zeros(h.nrows(), h.ncols());
    for u in 0..h.ncols() {
        let hu = h.column(u);
        psi += (&hu * hu.adjoint()) * C64::from(rho[u] * beta[u].norm_sqr());
        z.set_column(u, &(hu * (beta[u] * rho[u])));
    }
    DigitalSolver::antenna_space(psi, z).precoder(0.0, h.nrows(), h.ncols())
}

/// Converged digital block.
#[derive(Debug, Clone)]
pub struct DigitalBlock {
    pub w: Vec<CMat>,
    pub aux: Auxiliaries,
    pub nu: f64,
    pub objective: f64,
    pub passes: usize,
    /// `F` after every sub-step (β, ρ, W) of every pass.
    pub trace: Vec<f64>,
}

/// Cyclic `β → ρ → W` passes until `F` changes by less than `INNER_TOL`
/// relative, followed by a final `β, ρ` refresh.
pub fn digital_inner_bcd(
    h: &[CMat],
    w: Vec<CMat>,
    aux: Auxiliaries,
    total_power: f64,
    noise_var: f64,
) -> Result<DigitalBlock> {
    let mut w = w;
    let mut aux = aux;
    let mut nu = 0.0;
    let mut f = wmmse_objective(h, &w, &aux, noise_var);
    let mut trace = vec![f];
    let mut passes = 0;
    while passes < INNER_MAX_PASSES {
        passes += 1;
        let start = f;
        let c = couplings(h, &w);
        for (g, cg) in c.iter().enumerate() {
            for u in 0..cg.nrows() {
                aux.beta[(u, g)] = update_beta(cg, u, noise_var)?;
            }
        }
        trace.push(wmmse_objective(h, &w, &aux, noise_var));
        for (g, cg) in c.iter().enumerate() {
            for u in 0..cg.nrows() {
                aux.rho[(u, g)] = update_rho(cg, u, noise_var);
            }
        }
        trace.push(wmmse_objective(h, &w, &aux, noise_var));
        let (nw, nnu) = update_digital(h, &aux, total_power)?;
        w = nw;
        nu = nnu;
        f = wmmse_objective(h, &w, &aux, noise_var);
        trace.push(f);
        if (start - f).abs() / f.abs().max(1.0) < INNER_TOL {
            break;
        }
    }
    aux = Auxiliaries::optimal(h, &w, noise_var)?;
    f = wmmse_objective(h, &w, &aux, noise_var);
    trace.push(f);
    Ok(DigitalBlock { w, aux, nu, objective: f, passes, trace })
}

/// `ξ^(ε) = ∂F/∂h*` for every `(m, u)` on every subcarrier.
pub fn mse_sensitivity(h: &[CMat], w: &[CMat], aux: &Auxiliaries) -> Vec<CMat> {
    couplings(h, w)
        .iter()
        .zip(w)
        .enumerate()
        .map(|(g, (c, wg))| {
            let mut xi = CMat::zeros(wg.nrows(), c.nrows());
            for u in 0..c.nrows() {
                let beta = aux.beta[(u, g)];
                let rho = aux.rho[(u, g)];
                let crow: CVec = c.row(u).transpose().map(|z| z.conj());
                let col = (wg * crow) * C64::from(beta.norm_sqr()) - wg.column(u) * beta.conj();
                xi.set_column(u, &(col * C64::from(rho)));
            }
            xi
        })
        .collect()
}

/// Euclidean gradient of `F` w.r.t. the EM weights (compact K x M).
pub fn em_euclid_grad_wmmse(state: &ChannelState<'_>, w: &[CMat], aux: &Auxiliaries) -> DMatrix<f64> {
    state.pattern_gradient(&mse_sensitivity(state.channels(), w, aux))
}

/// Gradient of `F` w.r.t. the position of antenna `m`.
pub fn spatial_grad_eps(state: &ChannelState<'_>, w: &[CMat], aux: &Auxiliaries, m: usize) -> Vec3 {
    state.position_gradient(m, &mse_sensitivity(state.channels(), w, aux))
}

/// MRT directions with one global scaling to `P_T`.
pub fn mrt_init(h: &[CMat], total_power: f64) -> Vec<CMat> {
    let e = total_energy(h);
    if !(e > 0.0) {
        return h.to_vec();
    }
    let s = C64::from((total_power / e).sqrt());
    h.iter().map(|hg| hg * s).collect()
}

/// `N x N` uniform port grid per antenna over its feasible square.
#[derive(Debug, Clone, PartialEq)]
pub struct PortGrid {
    pub n: usize,
    /// `[m][iy * n + iz]`.
    pub ports: Vec<Vec<Vec3>>,
}

impl PortGrid {
    pub fn new(geometry: &ArrayGeometry, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig("port grid needs N ≥ 1".into()));
        }
        let offset = |a: usize, d: f64| if n == 1 { 0.0 } else { -d + 2.0 * d * a as f64 / (n - 1) as f64 };
        let ports = geometry
            .regions
            .iter()
            .map(|r| {
                let mut v = Vec::with_capacity(n * n);
                for iy in 0..n {
                    for iz in 0..n {
                        v.push(Vec3::new(
                            0.0,
                            r.center.y + offset(iy, r.half_width),
                            r.center.z + offset(iz, r.half_width),
                        ));
                    }
                }
                v
            })
            .collect();
        Ok(Self { n, ports })
    }

    /// Index of the port nearest to `p`; ties go to the smaller `(iy, iz)`.
    pub fn nearest(&self, m: usize, p: &Vec3) -> usize {
        let ports = &self.ports[m];
        let scale = ports.iter().map(|q| (q - ports[0]).norm()).fold(0.0, f64::max).max(1e-300);
        let tie = 1e-12 * scale;
        let mut best = 0;
        let mut best_d = (ports[0] - p).norm();
        for (i, q) in ports.iter().enumerate().skip(1) {
            let d = (q - p).norm();
            if d < best_d - tie {
                best = i;
                best_d = d;
            }
        }
        best
    }
}

pub fn quantize_positions(positions: &[Vec3], grid: &PortGrid) -> Vec<Vec3> {
    positions.iter().enumerate().map(|(m, p)| grid.ports[m][grid.nearest(m, p)]).collect()
}

const DISCRETE_MAX_CYCLES: usize = 50;

/// Best-port sweep with `W` fixed; `β, ρ` are frozen within a cycle and
/// refreshed at its end. Returns the number of cycles run.
pub fn spatial_block_discrete(
    state: &mut ChannelState<'_>,
    grid: &PortGrid,
    w: &[CMat],
    aux: &mut Auxiliaries,
    noise_var: f64,
) -> Result<usize> {
    for (m, p) in quantize_positions(state.positions(), grid).into_iter().enumerate() {
        if p != state.positions()[m] {
            state.set_position(m, p);
        }
    }
    for cycle in 1..=DISCRETE_MAX_CYCLES {
        let mut changed = false;
        for m in 0..state.num_antennas() {
            let mut best = wmmse_objective(state.channels(), w, aux, noise_var);
            let current = grid.nearest(m, &state.positions()[m]);
            let mut best_port = current;
            let mut trial = state.clone();
            for (i, port) in grid.ports[m].iter().enumerate() {
                if i == current {
                    continue;
                }
                trial.set_position(m, *port);
                let f = wmmse_objective(trial.channels(), w, aux, noise_var);
                if f < best {
                    best = f;
                    best_port = i;
                }
            }
            if best_port != current {
                state.set_position(m, grid.ports[m][best_port]);
                changed = true;
            }
        }
        *aux = Auxiliaries::optimal(state.channels(), w, noise_var)?;
        if !changed {
            return Ok(cycle);
        }
    }
    Ok(DISCRETE_MAX_CYCLES)
}

/// How antenna positions are updated inside the alternation.
#[derive(Debug, Clone, Copy)]
pub enum SpatialUpdate<'g> {
    Frozen,
    Continuous,
    Discrete(&'g PortGrid),
}

#[derive(Debug, Clone)]
pub struct WmmseState {
    pub w: Vec<CMat>,
    pub em: MaskedObliquePoint,
    pub positions: Vec<Vec3>,
    pub aux: Auxiliaries,
    pub objective: f64,
    pub sum_se: f64,
    pub lagrange_nu: f64,
}

#[derive(Debug, Clone)]
pub struct WmmseOutcome {
    pub state: WmmseState,
    pub trace: Vec<IterationRecord>,
    /// `F` at every block boundary, starting from the initialization.
    pub objective_trace: Vec<f64>,
}

pub fn run_wmmse_tridomain(problem: &Problem<'_>, init: Init, options: &RunOptions) -> Result<WmmseOutcome> {
    let spatial = if options.optimize_positions { SpatialUpdate::Continuous } else { SpatialUpdate::Frozen };
    run_wmmse_with(problem, init, options, spatial)
}

/// `F` with `β`, `ρ` at their optimum for the given channels and precoders.
///
/// Used as the line-search merit of the EM and spatial blocks. Its gradient at
/// a point with optimal auxiliaries is the fixed-auxiliary one, but it does not
/// penalize gain growth past the frozen equalizer, so steps stay long.
fn profile_objective(h: &[CMat], w: &[CMat], noise: f64) -> f64 {
    match Auxiliaries::optimal(h, w, noise) {
        Ok(aux) => wmmse_objective(h, w, &aux, noise),
        Err(_) => f64::INFINITY,
    }
}

fn profile_sensitivity(h: &[CMat], w: &[CMat], noise: f64) -> Vec<CMat> {
    let aux = Auxiliaries::optimal(h, w, noise).expect("auxiliaries at an accepted point");
    mse_sensitivity(h, w, &aux)
}

pub fn run_wmmse_with(
    problem: &Problem<'_>,
    init: Init,
    options: &RunOptions,
    spatial: SpatialUpdate<'_>,
) -> Result<WmmseOutcome> {
    let noise = problem.noise_var;
    let p_t = problem.total_power;
    let mut init = init;
    if let SpatialUpdate::Discrete(grid) = spatial {
        init.positions = quantize_positions(&init.positions, grid);
    }
    let mut state = ChannelState::new(problem.models, init.positions, init.em)?;
    let mut w = match init.precoders.take() {
        Some(w) => w,
        None => mrt_init(state.channels(), p_t),
    };
    let mut aux = Auxiliaries::optimal(state.channels(), &w, noise)?;
    let mut nu = 0.0;
    let mut f = wmmse_objective(state.channels(), &w, &aux, noise);
    let mut objective_trace = vec![f];
    let mut trace = Vec::new();

    for iteration in 1..=options.max_iterations {
        let start = f;
        let t0 = Instant::now();
        let block = digital_inner_bcd(state.channels(), w, aux, p_t, noise)?;
        (w, aux) = (block.w, block.aux);
        objective_trace.push(block.objective);
        let mut digital_time = t0.elapsed();

        let t1 = Instant::now();
        if options.optimize_em {
            em_descent_step(
                &mut state,
                |s| profile_objective(s.channels(), &w, noise),
                |s| profile_sensitivity(s.channels(), &w, noise),
            )?;
            aux = Auxiliaries::optimal(state.channels(), &w, noise)?;
            objective_trace.push(wmmse_objective(state.channels(), &w, &aux, noise));
        }
        let em_time = t1.elapsed();

        let t2 = Instant::now();
        let block = digital_inner_bcd(state.channels(), w, aux, p_t, noise)?;
        (w, aux) = (block.w, block.aux);
        objective_trace.push(block.objective);
        digital_time += t2.elapsed();

        let t3 = Instant::now();
        match spatial {
            SpatialUpdate::Frozen => {}
            SpatialUpdate::Continuous => {
                spatial_descent_block(
                    &mut state,
                    problem.regions,
                    |s| profile_objective(s.channels(), &w, noise),
                    |s| profile_sensitivity(s.channels(), &w, noise),
                );
                aux = Auxiliaries::optimal(state.channels(), &w, noise)?;
                objective_trace.push(wmmse_objective(state.channels(), &w, &aux, noise));
            }
            SpatialUpdate::Discrete(grid) => {
                spatial_block_discrete(&mut state, grid, &w, &mut aux, noise)?;
                objective_trace.push(wmmse_objective(state.channels(), &w, &aux, noise));
            }
        }
        let spatial_time = t3.elapsed();

        let t4 = Instant::now();
        let block = digital_inner_bcd(state.channels(), w, aux, p_t, noise)?;
        (w, aux, nu) = (block.w, block.aux, block.nu);
        f = block.objective;
        objective_trace.push(f);
        digital_time += t4.elapsed();

        let sum_se = sinr_and_se(state.channels(), &w, noise)?.sum_se;
        trace.push(IterationRecord {
            iteration,
            objective: f,
            sum_se,
            nu,
            em_time,
            spatial_time,
            digital_time,
        });
        if (start - f).abs() / f.abs().max(1.0) <= options.tol {
            break;
        }
    }
    let sum_se = sinr_and_se(state.channels(), &w, noise)?.sum_se;
    Ok(WmmseOutcome {
        state: WmmseState {
            w,
            em: state.em().clone(),
            positions: state.positions().to_vec(),
            aux,
            objective: f,
            sum_se,
            lagrange_nu: nu,
        },
        trace,
        objective_trace,
    })
}

/// Continuous design snapped to the nearest ports, then the digital block is
/// re-converged at the snapped positions (EM weights untouched).
pub fn run_wmmse_quantized(
    problem: &Problem<'_>,
    init: Init,
    options: &RunOptions,
    grid: &PortGrid,
) -> Result<WmmseOutcome> {
    let mut out = run_wmmse_with(problem, init, options, SpatialUpdate::Continuous)?;
    let positions = quantize_positions(&out.state.positions, grid);
    let state = ChannelState::new(problem.models, positions.clone(), out.state.em.clone())?;
    let noise = problem.noise_var;
    let aux = Auxiliaries::optimal(state.channels(), &out.state.w, noise)?;
    let block = digital_inner_bcd(state.channels(), out.state.w.clone(), aux, problem.total_power, noise)?;
    out.state.sum_se = sinr_and_se(state.channels(), &block.w, noise)?.sum_se;
    out.state.positions = positions;
    out.state.objective = block.objective;
    out.state.w = block.w;
    out.state.aux = block.aux;
    out.state.lagrange_nu = block.nu;
    Ok(out)
}
