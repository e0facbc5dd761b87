use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use vflow_core::rng;
use vflow_core::samplers::*;

fn batch_mean_se(series: &[f64], batches: usize) -> f64 {
    let b = series.len() / batches;
    let means: Vec<f64> = (0..batches).map(|i| series[i * b..(i + 1) * b].iter().sum::<f64>() / b as f64).collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

/// Conjugate posterior of `y = A ξ + η`, `η ~ N(0, σ² I)`, `ξ ~ N(μ₀, I)`.
fn conjugate(a: &DMatrix<f64>, y: &DVector<f64>, sigma2: f64, mu0: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let d = a.ncols();
    let prec = a.transpose() * a / sigma2 + DMatrix::identity(d, d);
    let cov = prec.try_inverse().unwrap();
    let mean = &cov * (a.transpose() * y / sigma2 + mu0);
    (mean, cov)
}

#[test]
fn pcn_accepts_downhill_moves_surely() {
    assert_eq!(pcn_accept_prob(3.0, 1.0), 1.0);
    assert_eq!(pcn_accept_prob(1.0, 1.0), 1.0);
    assert!((pcn_accept_prob(1.0, 2.0) - (-1f64).exp()).abs() < 1e-15);
}

#[test]
fn pcn_with_unit_beta_draws_from_the_prior() {
    let phi = |_: &[f64]| Ok(0.0);
    let state = PcnState::new(vec![5.0, -5.0], 1.0, vec![1.0, 2.0], vec![1.0, 1.0], &phi).unwrap();
    let mut a = rng::seeded(1);
    let mut b = rng::seeded(1);
    let p = state.propose(&mut a);
    let z = rng::normal_vec(&mut b, 2);
    assert!((p[0] - (1.0 + z[0])).abs() < 1e-12);
    assert!((p[1] - (2.0 + z[1])).abs() < 1e-12);
}

#[test]
fn pcn_preserves_the_prior_under_constant_misfit() {
    let phi = |_: &[f64]| Ok(1.7);
    let mu0 = vec![0.5, -1.0, 2.0, 0.0];
    let cfg = PcnConfig { iters: 1_000_000, beta: 0.5, burn_frac: 0.0, thin: 10 };
    let mut state = PcnState::new(mu0.clone(), cfg.beta, mu0.clone(), vec![1.0; 4], &phi).unwrap();
    let mut r = rng::seeded(7);
    let mut draws = Vec::new();
    for it in 0..cfg.iters {
        pcn_step(&mut state, &phi, &mut r).unwrap();
        if it % cfg.thin == 0 {
            draws.push(state.current.clone());
        }
    }
    assert_eq!(draws.len(), 100_000);
    assert_eq!(state.acceptance_rate(), 1.0);
    for c in 0..4 {
        let xs: Vec<f64> = draws.iter().map(|x| x[c]).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((m - mu0[c]).abs() < 0.05, "coordinate {c}: mean {m}");
        assert!((v - 1.0).abs() < 0.05, "coordinate {c}: variance {v}");
    }
}

#[test]
fn pcn_matches_conjugate_posterior_mean() {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 0.8]);
    let y = DVector::from_vec(vec![0.7, -0.4]);
    let sigma2 = 0.25;
    let (mean, _) = conjugate(&a, &y, sigma2, &DVector::zeros(2));
    let phi = |xi: &[f64]| {
        let r = &a * DVector::from_column_slice(xi) - &y;
        Ok(0.5 * r.norm_squared() / sigma2)
    };
    let cfg = PcnConfig { iters: 200_000, beta: 0.3, burn_frac: 0.2, thin: 1 };
    let out = pcn_run(&[0.0, 0.0], &phi, &cfg, 11).unwrap();
    assert!(out.acceptance > 0.1 && out.acceptance < 0.99);
    for c in 0..2 {
        let series: Vec<f64> = out.samples.iter().map(|s| s[c]).collect();
        let se = batch_mean_se(&series, 50);
        assert!((out.mean[c] - mean[c]).abs() < 3.0 * se, "coordinate {c}: {} vs {} (se {se})", out.mean[c], mean[c]);
    }
    let again = pcn_run(&[0.0, 0.0], &phi, &cfg, 11).unwrap();
    assert_eq!(out.samples, again.samples);
}

#[test]
fn unscented_transform_of_identity_returns_the_mean() {
    let mean = DVector::from_vec(vec![0.3, -1.2, 4.0]);
    let l = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.4, 2.0, 0.0, -0.5, 0.1, 0.7]);
    let cov = &l * l.transpose();
    let pts = sigma_points(&mean, &cov).unwrap();
    let w = sigma_weights(3);
    assert_eq!(pts.len(), 7);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    let mut m = DVector::zeros(3);
    let mut c = DMatrix::zeros(3, 3);
    for (wi, p) in w.iter().zip(&pts) {
        m += p * *wi;
    }
    for (wi, p) in w.iter().zip(&pts) {
        c += (p - &m) * (p - &m).transpose() * *wi;
    }
    assert!((m - &mean).amax() < 1e-12);
    assert!((c - cov).amax() < 1e-12);
}

#[test]
fn uki_without_information_leaves_state_unchanged() {
    let d = 3;
    let mut st = UkiState::regularized(&[0.1, 0.2, 0.3], 1.0, DMatrix::identity(2, 2) * 1e300).unwrap();
    st.mean = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    st.omega = Omega::Fixed(DMatrix::zeros(d, d));
    let before = st.clone();
    let g = |xs: &[Vec<f64>]| Ok(xs.iter().map(|x| vec![x[0] + x[1], x[2]]).collect());
    uki_step(&mut st, &[3.0, 4.0], &g).unwrap();
    assert!((&st.mean - &before.mean).amax() < 1e-12);
    assert!((&st.cov - &before.cov).amax() < 1e-12);
}

/// Steady state of the linear Kalman filter for
/// `θ' = r₀ + α(θ − r₀) + ω`, `y = Gθ + η` by Riccati iteration and a direct
/// solve for the mean.
fn kalman_fixed_point(g: &DMatrix<f64>, y: &DVector<f64>, r0: &DVector<f64>, alpha: f64, omega: &DMatrix<f64>, s_eta: &DMatrix<f64>) -> DVector<f64> {
    let d = g.ncols();
    let mut c = DMatrix::identity(d, d);
    for _ in 0..10_000 {
        let ch = &c * (alpha * alpha) + omega;
        let s = g * &ch * g.transpose() + s_eta;
        let next = &ch - &ch * g.transpose() * s.try_inverse().unwrap() * g * &ch;
        if (&next - &c).amax() < 1e-15 {
            c = next;
            break;
        }
        c = next;
    }
    let ch = &c * (alpha * alpha) + omega;
    let s = g * &ch * g.transpose() + s_eta;
    let k = &ch * g.transpose() * s.try_inverse().unwrap();
    let ikg = DMatrix::identity(d, d) - &k * g;
    let lhs = DMatrix::identity(d, d) - &ikg * alpha;
    let rhs = &ikg * r0 * (1.0 - alpha) + &k * y;
    lhs.lu().solve(&rhs).unwrap()
}

#[test]
fn regularized_uki_converges_to_linear_fixed_point() {
    let g = DMatrix::from_row_slice(3, 4, &[1.0, 0.2, 0.0, -0.5, 0.0, 1.5, 0.3, 0.1, 0.4, 0.0, -1.0, 0.8]);
    let y = DVector::from_vec(vec![1.0, -0.5, 0.25]);
    let r0 = DVector::from_vec(vec![0.1, 0.0, -0.2, 0.3]);
    let s_eta = DMatrix::identity(3, 3) * 0.04;
    let alpha = 0.5;
    let mut st = UkiState::regularized(r0.as_slice(), alpha, s_eta.clone()).unwrap();
    let omega = match &st.omega {
        Omega::Fixed(o) => o.clone(),
        Omega::Current => unreachable!(),
    };
    let gg = g.clone();
    let f = move |xs: &[Vec<f64>]| Ok(xs.iter().map(|x| (&gg * DVector::from_column_slice(x)).as_slice().to_vec()).collect());
    for _ in 0..200 {
        uki_step(&mut st, y.as_slice(), &f).unwrap();
        assert!((&st.cov - st.cov.transpose()).amax() < 1e-12);
    }
    let oracle = kalman_fixed_point(&g, &y, &r0, alpha, &omega, &s_eta);
    assert!((&st.mean - &oracle).amax() < 1e-3, "{} vs {}", st.mean, oracle);
}

#[test]
fn bayesian_uki_reaches_conjugate_posterior() {
    let a = DMatrix::from_row_slice(2, 3, &[1.0, -0.4, 0.2, 0.3, 0.9, -1.1]);
    let y = DVector::from_vec(vec![0.6, -0.3]);
    let sigma2 = 0.09;
    let mu0 = DVector::from_vec(vec![0.2, 0.0, -0.1]);
    let (mean, cov) = conjugate(&a, &y, sigma2, &mu0);
    let mut st = UkiState::bayesian(mu0.as_slice(), DMatrix::identity(3, 3), DMatrix::identity(2, 2) * sigma2);
    let aa = a.clone();
    let f = move |xs: &[Vec<f64>]| Ok(xs.iter().map(|x| (&aa * DVector::from_column_slice(x)).as_slice().to_vec()).collect());
    uki_run(&mut st, y.as_slice(), &f, 100).unwrap();
    assert!((&st.mean - &mean).amax() < 1e-6);
    assert!((&st.cov - &cov).amax() < 1e-6);
}

#[test]
fn uki_rejects_invalid_alpha() {
    assert!(UkiState::regularized(&[0.0], 0.0, DMatrix::identity(1, 1)).is_err());
    assert!(UkiState::regularized(&[0.0], 1.5, DMatrix::identity(1, 1)).is_err());
}

#[test]
fn svgd_bandwidth_hand_value() {
    let h = median_bandwidth(&[vec![0.0], vec![2.0]]).unwrap();
    assert!((h - 4.0 / 2f64.ln()).abs() < 1e-12);
    assert!((h - 5.771).abs() < 1e-3);
}

#[test]
fn svgd_rejects_single_particle() {
    assert!(SvgdEnsemble::new(vec![vec![0.0]], 0.1).is_err());
    assert!(median_bandwidth(&[vec![0.0]]).is_err());
}

#[test]
fn svgd_identical_particles_have_no_repulsion() {
    let p = vec![vec![1.0, 2.0]; 3];
    let g = vec![vec![0.0, 0.0]; 3];
    let phi = svgd_direction(&p, &g, 1.0);
    assert!(phi.iter().flatten().all(|v| *v == 0.0));
}

#[test]
fn svgd_repulsion_separates_close_particles() {
    let p = vec![vec![0.0, 0.0], vec![0.01, 0.0], vec![1.0, 1.0]];
    let min_dist = |p: &[Vec<f64>]| {
        let mut m = f64::INFINITY;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                m = m.min(((p[i][0] - p[j][0]).powi(2) + (p[i][1] - p[j][1]).powi(2)).sqrt());
            }
        }
        m
    };
    let mut ens = SvgdEnsemble::new(p.clone(), 1e-2).unwrap();
    let zero = |xs: &[Vec<f64>]| Ok(vec![vec![0.0; 2]; xs.len()]);
    let before = min_dist(&ens.particles);
    svgd_step(&mut ens, &zero).unwrap();
    assert!(min_dist(&ens.particles) > before);
}

#[test]
fn svgd_recovers_gaussian_mean() {
    let target = [1.0, -0.5];
    let mut r = rng::seeded(3);
    let init: Vec<Vec<f64>> = (0..100).map(|_| rng::normal_vec(&mut r, 2).iter().map(|v| 3.0 * v).collect()).collect();
    let mut ens = SvgdEnsemble::new(init, 5e-2).unwrap();
    let grad = |xs: &[Vec<f64>]| Ok(xs.iter().map(|x| vec![target[0] - x[0], target[1] - x[1]]).collect());
    for _ in 0..2000 {
        svgd_step(&mut ens, &grad).unwrap();
    }
    let m = ens.mean();
    assert!((m[0] - target[0]).abs() < 0.05 && (m[1] - target[1]).abs() < 0.05, "{m:?}");
}

#[test]
fn stretch_unit_z_is_self_transition() {
    let xk = [1.0, 2.0, -3.0];
    let xj = [0.5, 0.0, 7.0];
    assert_eq!(stretch_proposal(&xk, &xj, 1.0), xk.to_vec());
}

#[test]
fn stretch_correction_vanishes_in_one_dimension() {
    for z in [0.5, 1.3, 2.0] {
        assert!((stretch_log_accept(1, z, -1.0, -2.0) - 1.0).abs() < 1e-15);
        assert!((stretch_log_accept(3, z, -1.0, -2.0) - (1.0 + 2.0 * z.ln())).abs() < 1e-14);
    }
}

#[test]
fn stretch_variance_matches_gaussian() {
    let sd = 2.5;
    let logp = |x: &[f64]| -0.5 * (x[0] / sd).powi(2);
    let mut r = rng::seeded(5);
    let init: Vec<Vec<f64>> = (0..100).map(|_| vec![rng::normal(&mut r)]).collect();
    let cfg = StretchConfig { walkers: 100, burn: 500, steps: 20_000, thin: 100, a: 2.0 };
    let out = ensemble_mcmc_run(&logp, init, &cfg, 9).unwrap();
    assert_eq!(out.len(), 20_000);
    let m = out.iter().map(|x| x[0]).sum::<f64>() / out.len() as f64;
    let v = out.iter().map(|x| (x[0] - m).powi(2)).sum::<f64>() / out.len() as f64;
    assert!((v / (sd * sd) - 1.0).abs() < 0.05, "variance {v}");
}

#[test]
fn stretch_rejects_small_ensembles() {
    let logp = |_: &[f64]| 0.0;
    let init = vec![vec![0.0; 3]; 4];
    assert!(ensemble_mcmc_run(&logp, init, &StretchConfig::default(), 0).is_err());
}

proptest! {
    #[test]
    fn stretch_z_stays_in_support(seed in 0u64..1000) {
        let mut r = rng::seeded(seed);
        for _ in 0..50 {
            let z = stretch_z(2.0, &mut r);
            prop_assert!((0.5..=2.0).contains(&z));
        }
    }

    #[test]
    fn uki_covariance_stays_symmetric(seed in 0u64..50) {
        let mut r = rng::seeded(seed);
        let d = 3;
        let a: Vec<f64> = rng::normal_vec(&mut r, 2 * d);
        let y = rng::normal_vec(&mut r, 2);
        let mut st = UkiState::regularized(&[0.0; 3], 0.5, DMatrix::identity(2, 2) * 0.1).unwrap();
        let f = |xs: &[Vec<f64>]| Ok(xs.iter().map(|x| {
            (0..2).map(|i| (0..d).map(|j| a[i * d + j] * x[j]).sum::<f64>().tanh()).collect()
        }).collect());
        for _ in 0..10 {
            uki_step(&mut st, &y, &f).unwrap();
            prop_assert!((&st.cov - st.cov.transpose()).amax() <= 1e-12);
        }
    }

    #[test]
    fn pcn_proposal_is_deterministic(seed in 0u64..1000) {
        let phi = |x: &[f64]| Ok(x.iter().map(|v| v * v).sum::<f64>());
        let cfg = PcnConfig { iters: 50, beta: 0.2, burn_frac: 0.2, thin: 1 };
        let a = pcn_run(&[0.0, 1.0], &phi, &cfg, seed).unwrap();
        let b = pcn_run(&[0.0, 1.0], &phi, &cfg, seed).unwrap();
        prop_assert_eq!(a.samples, b.samples);
    }
}
