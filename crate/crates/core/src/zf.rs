//! ZF-based tri-domain optimization.
//!
//! Per outer iteration: ZF precoder, one EM manifold ascent step on `R`, ZF
//! refresh, an inner cyclic spatial ascent loop, ZF refresh, then the new `R`.
//! The EM and spatial blocks hold the digital precoder fixed.

use std::f64::consts::LN_2;
use std::time::Instant;

use nalgebra::DMatrix;

use crate::channel::{couplings, sinr_and_se, sinr_from_couplings, ChannelState};
use crate::error::{Error, Result};
use crate::linalg::{hermitian_eig_desc, CMat, C64};
use crate::opt::MaskedObliquePoint;
use crate::precoder::{em_descent_step, spatial_descent_block, Init, IterationRecord, Problem, RunOptions};
use crate::scenario::{FeasibleRegion, Vec3};

/// Smallest admissible eigenvalue ratio of the normalized-channel Gram matrix.
const GRAM_RCOND: f64 = 1e-12;

/// Normalized-channel ZF with one global Frobenius scaling to `P_T`.
pub fn zf_digital(h: &[CMat], total_power: f64) -> Result<Vec<CMat>> {
    let g_len = h.len().max(1) as f64;
    h.iter()
        .enumerate()
        .map(|(g, hg)| {
            let (m, u) = hg.shape();
            if u > m {
                return Err(Error::Dimension(format!("ZF needs M ≥ U, got M = {m}, U = {u}")));
            }
            let mut ht = hg.clone();
            for (k, mut col) in ht.column_iter_mut().enumerate() {
                let n = col.norm();
                if !(n > 0.0) {
                    return Err(Error::RankDeficient(format!("user {k} has a zero channel on subcarrier {g}")));
                }
                col.unscale_mut(n);
            }
            let gram = ht.adjoint() * &ht;
            let (eig, _) = hermitian_eig_desc(&gram);
            if eig[u - 1] < GRAM_RCOND * eig[0] {
                return Err(Error::RankDeficient(format!(
                    "normalized channel Gram on subcarrier {g} is singular (λ_min/λ_max = {:.3e})",
                    eig[u - 1] / eig[0]
                )));
            }
            let inv = gram
                .cholesky()
                .ok_or_else(|| Error::RankDeficient(format!("Gram on subcarrier {g} not positive definite")))?
                .inverse();
            let wt = ht * inv;
            let scale = (total_power / g_len).sqrt() / wt.norm();
            Ok(wt * C64::from(scale))
        })
        .collect()
}

/// `ξ^(R)` for user `u`, antenna `m`, given the coupling matrix of one
/// subcarrier.
pub fn se_kernel(c: &CMat, w: &CMat, u: usize, m: usize, noise_var: f64) -> C64 {
    let total: f64 = (0..c.ncols()).map(|l| c[(u, l)].norm_sqr()).sum::<f64>() + noise_var;
    let sinr = sinr_from_couplings(c, u, noise_var);
    let mut interference = C64::new(0.0, 0.0);
    for l in (0..c.ncols()).filter(|&l| l != u) {
        interference += c[(u, l)].conj() * w[(m, l)];
    }
    (c[(u, u)].conj() * w[(m, u)] - interference * sinr) / (LN_2 * total)
}

/// `∂R/∂h*` for every `(m, u)` on every subcarrier.
pub fn se_sensitivity(h: &[CMat], w: &[CMat], noise_var: f64) -> Vec<CMat> {
    couplings(h, w)
        .iter()
        .zip(w)
        .map(|(c, wg)| CMat::from_fn(wg.nrows(), c.nrows(), |m, u| se_kernel(c, wg, u, m, noise_var)))
        .collect()
}

fn neg(v: Vec<CMat>) -> Vec<CMat> {
    v.into_iter().map(|x| -x).collect()
}

/// Euclidean gradient of `-R` w.r.t. the EM weights (compact K x M).
pub fn em_euclid_grad_zf(state: &ChannelState<'_>, w: &[CMat], noise_var: f64) -> DMatrix<f64> {
    -state.pattern_gradient(&se_sensitivity(state.channels(), w, noise_var))
}

/// Gradient of `R` w.r.t. the position of antenna `m`.
pub fn spatial_grad_r(state: &ChannelState<'_>, w: &[CMat], noise_var: f64, m: usize) -> Vec3 {
    state.position_gradient(m, &se_sensitivity(state.channels(), w, noise_var))
}

fn sum_se(state: &ChannelState<'_>, w: &[CMat], noise_var: f64) -> f64 {
    sinr_and_se(state.channels(), w, noise_var).map_or(f64::NAN, |r| r.sum_se)
}

/// Inner spatial ascent on `R` with `W` fixed; returns cycles run.
pub fn spatial_block_zf(
    state: &mut ChannelState<'_>,
    regions: &[FeasibleRegion],
    w: &[CMat],
    noise_var: f64,
) -> usize {
    spatial_descent_block(
        state,
        regions,
        |s| -sum_se(s, w, noise_var),
        |s| neg(se_sensitivity(s.channels(), w, noise_var)),
    )
}

/// One EM ascent step on `R` with `W` fixed; returns the accepted step.
pub fn em_block_zf(state: &mut ChannelState<'_>, w: &[CMat], noise_var: f64) -> Result<f64> {
    em_descent_step(
        state,
        |s| -sum_se(s, w, noise_var),
        |s| neg(se_sensitivity(s.channels(), w, noise_var)),
    )
}

#[derive(Debug, Clone)]
pub struct ZfState {
    pub w: Vec<CMat>,
    pub em: MaskedObliquePoint,
    pub positions: Vec<Vec3>,
    /// `R`, summed over subcarriers.
    pub sum_se: f64,
}

#[derive(Debug, Clone)]
pub struct ZfOutcome {
    pub state: ZfState,
    pub trace: Vec<IterationRecord>,
}

pub fn run_zf_tridomain(problem: &Problem<'_>, init: Init, options: &RunOptions) -> Result<ZfOutcome> {
    let noise = problem.noise_var;
    let mut state = ChannelState::new(problem.models, init.positions, init.em)?;
    let mut w = zf_digital(state.channels(), problem.total_power)?;
    let mut r = sum_se(&state, &w, noise);
    let mut trace = Vec::new();
    for iteration in 1..=options.max_iterations {
        let t0 = Instant::now();
        w = zf_digital(state.channels(), problem.total_power)?;
        let mut digital_time = t0.elapsed();

        let t1 = Instant::now();
        if options.optimize_em {
            em_block_zf(&mut state, &w, noise)?;
        }
        let em_time = t1.elapsed();

        let t2 = Instant::now();
        w = zf_digital(state.channels(), problem.total_power)?;
        digital_time += t2.elapsed();

        let t3 = Instant::now();
        if options.optimize_positions {
            spatial_block_zf(&mut state, problem.regions, &w, noise);
        }
        let spatial_time = t3.elapsed();

        let t4 = Instant::now();
        w = zf_digital(state.channels(), problem.total_power)?;
        digital_time += t4.elapsed();

        let new_r = sum_se(&state, &w, noise);
        trace.push(IterationRecord {
            iteration,
            objective: -new_r,
            sum_se: new_r,
            nu: 0.0,
            em_time,
            spatial_time,
            digital_time,
        });
        let change = (new_r - r).abs() / new_r.abs().max(1.0);
        r = new_r;
        if change <= options.tol {
            break;
        }
    }
    Ok(ZfOutcome {
        state: ZfState { w, em: state.em().clone(), positions: state.positions().to_vec(), sum_se: r },
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{true_models, EcsiModel, EffectiveChannelSet};
    use crate::em_basis::BasisSet;
    use crate::linalg::CVec;
    use crate::precoder::total_energy;
    use crate::scenario::{build_geometry, sample_realization, PathSet, SystemConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn crand(rng: &mut ChaCha8Rng) -> C64 {
        C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_channel() {
        let h = vec![CMat::identity(3, 3); 2];
        let w = zf_digital(&h, 6.0).unwrap();
        let expect = (6.0 / (2.0 * 3.0f64)).sqrt();
        for wg in &w {
            assert!((wg - CMat::identity(3, 3) * C64::from(expect)).camax() < 1e-14);
            assert!((wg.norm_squared() - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_user_is_matched_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hcol = CMat::from_fn(4, 1, |_, _| crand(&mut rng));
        let w = zf_digital(std::slice::from_ref(&hcol), 2.0).unwrap();
        let expect = &hcol * C64::from(2f64.sqrt() / hcol.norm());
        assert!((&w[0] - expect).camax() < 1e-13);
    }

    #[test]
    fn nulls_interference_and_meets_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h: Vec<CMat> = (0..3).map(|_| CMat::from_fn(8, 3, |_, _| crand(&mut rng))).collect();
        let w = zf_digital(&h, 5.0).unwrap();
        assert!((total_energy(&w) - 5.0).abs() < 1e-10 * 5.0);
        for (hg, wg) in h.iter().zip(&w) {
            for u in 0..3 {
                for l in (0..3).filter(|&l| l != u) {
                    let leak = (hg.column(u).adjoint() * wg.column(l))[(0, 0)].norm();
                    assert!(leak <= 1e-10 * hg.column(u).norm() * wg.column(l).norm());
                }
            }
        }
    }

    #[test]
    fn colliding_users_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let col = CMat::from_fn(4, 1, |_, _| crand(&mut rng));
        let mut h = CMat::zeros(4, 2);
        h.set_column(0, &col.column(0));
        h.set_column(1, &(col.column(0) * C64::new(0.0, 2.0)));
        assert!(matches!(zf_digital(&[h], 1.0), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn kernel_trivial_cases() {
        let c = CMat::zeros(2, 2);
        let w = CMat::from_element(3, 2, C64::new(1.0, 1.0));
        assert_eq!(se_kernel(&c, &w, 0, 1, 1.0), C64::new(0.0, 0.0));
        let c1 = CMat::from_element(1, 1, C64::new(0.5, -0.2));
        let w1 = CMat::from_element(2, 1, C64::new(0.3, 0.4));
        let p = c1[(0, 0)].norm_sqr() + 0.7;
        let expect = c1[(0, 0)].conj() * w1[(1, 0)] / (LN_2 * p);
        assert!((se_kernel(&c1, &w1, 0, 1, 0.7) - expect).norm() < 1e-15);
    }

    /// Wirtinger oracle: for real `R`, `∂R/∂Re(h) = 2 Re ξ` and
    /// `∂R/∂Im(h) = 2 Im ξ` where `ξ = ∂R/∂h*`.
    #[test]
    fn kernel_matches_wirtinger_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h: Vec<CMat> = (0..2).map(|_| CMat::from_fn(3, 2, |_, _| crand(&mut rng))).collect();
        let w: Vec<CMat> = (0..2).map(|_| CMat::from_fn(3, 2, |_, _| crand(&mut rng))).collect();
        let xi = se_sensitivity(&h, &w, 0.4);
        let r = |h: &[CMat]| sinr_and_se(h, &w, 0.4).unwrap().sum_se;
        let eps = 1e-6;
        for (g, m, u) in [(0, 0, 0), (1, 2, 1), (0, 1, 1)] {
            for (dir, part) in [(C64::new(1.0, 0.0), 0), (C64::new(0.0, 1.0), 1)] {
                let mut hp = h.clone();
                hp[g][(m, u)] += dir * eps;
                let mut hm = h.clone();
                hm[g][(m, u)] -= dir * eps;
                let fd = (r(&hp) - r(&hm)) / (2.0 * eps);
                let an = 2.0 * if part == 0 { xi[g][(m, u)].re } else { xi[g][(m, u)].im };
                assert!((fd - an).abs() <= 1e-5 * fd.abs().max(1e-3), "{fd} vs {an}");
            }
        }
    }

    fn tiny_problem(seed: u64) -> (SystemConfig, Vec<EcsiModel>, crate::scenario::ArrayGeometry) {
        let config = SystemConfig {
            num_subcarriers: 2,
            num_basis: 4,
            array_dims: [2, 1],
            num_users: 2,
            pilots_per_user: 1,
            num_paths: 3,
            ..Default::default()
        };
        let basis = BasisSet::new(4).unwrap();
        let users = sample_realization(&config, seed);
        let models = true_models(&users, &basis, &config).unwrap();
        let geo = crate::scenario::ArrayGeometry {
            dims: [2, 1],
            spacings: config.spacings,
            reference_positions: vec![Vec3::new(0.0, -0.25, 0.0) * config.lambda(), Vec3::new(0.0, 0.25, 0.0) * config.lambda()],
            regions: vec![],
        };
        (config, models, geo)
    }

    /// Literal Γ¹/Γ² form on the dense stacked eCSI as an independent oracle.
    fn gamma_oracle(set: &EffectiveChannelSet, w: &[CMat], noise: f64, m_ant: usize, k: usize) -> DMatrix<f64> {
        let zeta = 1.0 / noise;
        let mut acc = DMatrix::<f64>::zeros(m_ant * k, m_ant);
        let lc = set.lambda.map(C64::from);
        for (g, wg) in w.iter().enumerate() {
            for u in 0..wg.ncols() {
                let q: &CVec = &set.q[u][g];
                let hu = lc.adjoint() * q; // conj(h_u) as an M-vector: Λᵀ q̄
                let hrow = hu.transpose(); // h_uᴴ
                let a1 = &hrow * wg; // 1 x U
                let t1 = (&a1 * a1.adjoint())[(0, 0)].re;
                let wwh = wg * wg.adjoint();
                let v1 = &hrow * &wwh;
                let mut wbar = CMat::zeros(wg.nrows(), wg.ncols() - 1);
                let mut c = 0;
                for l in (0..wg.ncols()).filter(|&l| l != u) {
                    wbar.set_column(c, &wg.column(l));
                    c += 1;
                }
                let a2 = &hrow * &wbar;
                let t2 = (&a2 * a2.adjoint())[(0, 0)].re;
                let v2 = &hrow * (&wbar * wbar.adjoint());
                for m in 0..m_ant {
                    for kk in 0..k {
                        let qi = q[m * k + kk].conj();
                        let g1 = 2.0 * zeta * (qi * v1[(0, m)]).re / (1.0 + zeta * t1);
                        let g2 = 2.0 * zeta * (qi * v2[(0, m)]).re / (1.0 + zeta * t2);
                        acc[(m * k + kk, m)] -= (g1 - g2) / LN_2;
                    }
                }
            }
        }
        acc
    }

    #[test]
    fn em_gradient_matches_gamma_form_and_finite_differences() {
        let (_config, models, geo) = tiny_problem(7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let em = MaskedObliquePoint::new(DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0))).unwrap();
        let state = ChannelState::new(&models, geo.reference_positions.clone(), em.clone()).unwrap();
        let w: Vec<CMat> = (0..2).map(|_| CMat::from_fn(2, 2, |_, _| crand(&mut rng))).collect();
        let noise = 0.3;
        let grad = em_euclid_grad_zf(&state, &w, noise);
        let set = EffectiveChannelSet::assemble(&models, &em, &geo.reference_positions);
        let dense = crate::opt::compact_to_dense(&grad);
        assert!((&dense - gamma_oracle(&set, &w, noise, 2, 4)).amax() < 1e-10 * dense.amax());

        // finite differences of -R over random masked perturbations
        let neg_r = |alphas: DMatrix<f64>| {
            let h: Vec<CMat> = (0..2)
                .map(|g| {
                    CMat::from_fn(2, 2, |m, u| {
                        models[u].h_at(&alphas.column(m).into_owned(), &geo.reference_positions[m], g)
                    })
                })
                .collect();
            -sinr_and_se(&h, &w, noise).unwrap().sum_se
        };
        let eps = 1e-6;
        for _ in 0..10 {
            let d = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
            let fd = (neg_r(em.alphas() + &d * eps) - neg_r(em.alphas() - &d * eps)) / (2.0 * eps);
            let an = grad.dot(&d);
            assert!((fd - an).abs() <= 1e-5 * fd.abs().max(1e-6), "{fd} vs {an}");
        }
    }

    #[test]
    fn zero_precoder_gives_zero_gradient() {
        let (_c, models, geo) = tiny_problem(8);
        let state = ChannelState::new(&models, geo.reference_positions.clone(), MaskedObliquePoint::uniform(4, 2, 0)).unwrap();
        let w = vec![CMat::zeros(2, 2); 2];
        assert_eq!(em_euclid_grad_zf(&state, &w, 1.0).amax(), 0.0);
        assert_eq!(spatial_grad_r(&state, &w, 1.0, 0), Vec3::zeros());
    }

    #[test]
    fn spatial_gradient_matches_finite_differences() {
        let (config, models, geo) = tiny_problem(9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let em = MaskedObliquePoint::new(DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0))).unwrap();
        let state = ChannelState::new(&models, geo.reference_positions.clone(), em).unwrap();
        let w: Vec<CMat> = (0..2).map(|_| CMat::from_fn(2, 2, |_, _| crand(&mut rng))).collect();
        let step = 1e-6 * config.lambda();
        for m in 0..2 {
            let g = spatial_grad_r(&state, &w, 0.5, m);
            for axis in 0..3 {
                let mut sp = state.clone();
                let mut p = state.positions()[m];
                p[axis] += step;
                sp.set_position(m, p);
                let mut sm = state.clone();
                p[axis] -= 2.0 * step;
                sm.set_position(m, p);
                let fd = (sum_se(&sp, &w, 0.5) - sum_se(&sm, &w, 0.5)) / (2.0 * step);
                assert!((fd - g[axis]).abs() <= 1e-4 * fd.abs().max(1e-3), "{fd} vs {}", g[axis]);
            }
        }
    }

    #[test]
    fn gradient_along_path_direction() {
        // a single path leaving along +z gives a gradient parallel to z
        let config = SystemConfig::default();
        let basis = BasisSet::new(config.num_basis).unwrap();
        let paths = PathSet {
            gains: vec![C64::new(1.0, 0.0)],
            delays: vec![0.0],
            aod: vec![(0.0, 0.0)],
            aoa: vec![(1.0, 0.0)],
            rx_gain: vec![1.0],
            ue_position: Vec3::zeros(),
        };
        let models = vec![EcsiModel::from_paths(&paths, &basis, &config).unwrap()];
        let em = MaskedObliquePoint::uniform(config.num_basis, 2, 0);
        let pos = vec![Vec3::zeros(), Vec3::new(0.0, 0.1, 0.03)];
        let state = ChannelState::new(&models, pos, em).unwrap();
        let w = vec![CMat::from_element(2, 1, C64::new(0.3, 0.7)); config.num_subcarriers];
        let g = spatial_grad_r(&state, &w, 1.0, 1);
        assert_eq!(g.x, 0.0);
        assert!(g.y.abs() < 1e-15);
    }

    fn desk_problem(seed: u64) -> (SystemConfig, Vec<EcsiModel>, crate::scenario::ArrayGeometry) {
        let config = SystemConfig { num_subcarriers: 8, array_dims: [2, 2], num_basis: 16, ..Default::default() };
        let config = SystemConfig { pilots_per_user: 2, num_paths: 1, ..config };
        let basis = BasisSet::new(16).unwrap();
        let models = true_models(&sample_realization(&config, seed), &basis, &config).unwrap();
        let geo = build_geometry(&config).unwrap();
        (config, models, geo)
    }

    #[test]
    fn blocks_never_decrease_rate() {
        let config = SystemConfig { num_subcarriers: 12, array_dims: [2, 2], num_basis: 16, num_users: 2, pilots_per_user: 4, num_paths: 3, ..Default::default() };
        let basis = BasisSet::new(16).unwrap();
        let geo = build_geometry(&config).unwrap();
        for seed in 0..5 {
            let models = true_models(&sample_realization(&config, seed), &basis, &config).unwrap();
            let mut state = ChannelState::new(&models, geo.reference_positions.clone(), MaskedObliquePoint::uniform(16, 4, 0)).unwrap();
            let noise = config.noise_var();
            let w = zf_digital(state.channels(), config.total_power()).unwrap();
            let r0 = sum_se(&state, &w, noise);
            em_block_zf(&mut state, &w, noise).unwrap();
            let r1 = sum_se(&state, &w, noise);
            spatial_block_zf(&mut state, &geo.regions, &w, noise);
            let r2 = sum_se(&state, &w, noise);
            assert!(r1 >= r0 && r2 >= r1, "{r0} {r1} {r2}");
            assert!(state.positions().iter().zip(&geo.regions).all(|(p, r)| r.contains(p)));
        }
    }

    #[test]
    fn degenerate_box_freezes_positions() {
        let config = SystemConfig { num_subcarriers: 8, array_dims: [2, 2], num_basis: 16, num_users: 2, pilots_per_user: 4, num_paths: 2, d_max: 0.0, ..Default::default() };
        let basis = BasisSet::new(16).unwrap();
        let geo = build_geometry(&config).unwrap();
        let models = true_models(&sample_realization(&config, 1), &basis, &config).unwrap();
        let mut state = ChannelState::new(&models, geo.reference_positions.clone(), MaskedObliquePoint::uniform(16, 4, 0)).unwrap();
        let w = zf_digital(state.channels(), config.total_power()).unwrap();
        spatial_block_zf(&mut state, &geo.regions, &w, config.noise_var());
        assert_eq!(state.positions(), &geo.reference_positions[..]);
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let (config, models, geo) = desk_problem(3);
        let config = SystemConfig { num_users: 1, ..config };
        let models = &models[..1];
        let problem = Problem::new(models, &geo, &config);
        let init = Init::reference(&geo, 16);
        let opts = RunOptions { max_iterations: 0, ..RunOptions::from_config(&config) };
        let out = run_zf_tridomain(&problem, init.clone(), &opts).unwrap();
        assert!(out.trace.is_empty());
        assert_eq!(out.state.positions, init.positions);
        assert_eq!(out.state.em, init.em);
    }

    #[test]
    fn single_user_single_path_reaches_bound() {
        let (config, models, geo) = desk_problem(5);
        let config = SystemConfig { num_users: 1, max_iterations: 200, stop_tol: 1e-12, ..config };
        let models = &models[..1];
        let problem = Problem::new(models, &geo, &config);
        let out = run_zf_tridomain(&problem, Init::reference(&geo, 16), &RunOptions::from_config(&config)).unwrap();
        let x = models[0].chi[0][0].norm();
        let gmax2 = 16.0 / (4.0 * std::f64::consts::PI);
        let g = config.num_subcarriers as f64;
        let snr = config.total_power() / (g * config.noise_var()) * 4.0 * gmax2 * x * x;
        let bound = g * (1.0 + snr).log2();
        assert!(out.state.sum_se <= bound * (1.0 + 1e-12));
        assert!((bound - out.state.sum_se) / g < 1e-3, "{} vs {bound}", out.state.sum_se);
    }
}
