//! Baseline posterior samplers: pCN MCMC, unscented Kalman inversion, SVGD,
//! and the affine-invariant stretch-move ensemble sampler.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Misfit `Φ(ξ)`.
pub type MisfitFn<'a> = dyn Fn(&[f64]) -> Result<f64> + Sync + 'a;
/// Forward map applied to an ensemble of parameter vectors.
pub type EnsembleFn<'a> = dyn Fn(&[Vec<f64>]) -> Result<Vec<Vec<f64>>> + Sync + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct PcnState {
    pub current: Vec<f64>,
    pub phi: f64,
    pub beta: f64,
    pub prior_mean: Vec<f64>,
    /// Diagonal of `C₀` as standard deviations.
    pub prior_sd: Vec<f64>,
    pub accepted: u64,
    pub proposed: u64,
}

impl PcnState {
    pub fn new(start: Vec<f64>, beta: f64, prior_mean: Vec<f64>, prior_sd: Vec<f64>, misfit: &MisfitFn) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::config(format!("pCN step {beta} must lie in (0, 1]")));
        }
        if start.len() != prior_mean.len() || start.len() != prior_sd.len() {
            return Err(Error::shape("pCN start, prior mean and prior sd lengths differ"));
        }
        let phi = misfit(&start)?;
        Ok(Self { current: start, phi, beta, prior_mean, prior_sd, accepted: 0, proposed: 0 })
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    pub fn propose(&self, rng: &mut Rng) -> Vec<f64> {
        let c = (1.0 - self.beta * self.beta).sqrt();
        self.current
            .iter()
            .zip(&self.prior_mean)
            .zip(&self.prior_sd)
            .map(|((m, m0), sd)| c * (m - m0) + m0 + self.beta * sd * rng::normal(rng))
            .collect()
    }
}

/// `min(1, exp(Φ(m_n) − Φ(m*)))`.
pub fn pcn_accept_prob(phi_current: f64, phi_proposal: f64) -> f64 {
    if phi_proposal <= phi_current {
        1.0
    } else {
        (phi_current - phi_proposal).exp()
    }
}

pub fn pcn_step(state: &mut PcnState, misfit: &MisfitFn, rng: &mut Rng) -> Result<()> {
    let proposal = state.propose(rng);
    let phi = misfit(&proposal)?;
    state.proposed += 1;
    let u: f64 = rng.gen();
    if phi.is_finite() && u < pcn_accept_prob(state.phi, phi) {
        state.current = proposal;
        state.phi = phi;
        state.accepted += 1;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcnConfig {
    pub iters: usize,
    pub beta: f64,
    pub burn_frac: f64,
    pub thin: usize,
}

impl Default for PcnConfig {
    fn default() -> Self {
        Self { iters: 5000, beta: 0.1, burn_frac: 0.2, thin: 10 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainOutput {
    pub samples: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub acceptance: f64,
}

/// Chain started at the prior mean; keeps every `thin`-th post-burn-in state.
pub fn pcn_run(prior_mean: &[f64], misfit: &MisfitFn, cfg: &PcnConfig, seed: u64) -> Result<ChainOutput> {
    let d = prior_mean.len();
    let mut state = PcnState::new(prior_mean.to_vec(), cfg.beta, prior_mean.to_vec(), vec![1.0; d], misfit)?;
    let mut r = rng::stream(seed, "pcn");
    let burn = (cfg.burn_frac * cfg.iters as f64).round() as usize;
    let mut samples = Vec::new();
    for it in 0..cfg.iters {
        pcn_step(&mut state, misfit, &mut r)?;
        if it >= burn && (it - burn) % cfg.thin.max(1) == 0 {
            samples.push(state.current.clone());
        }
    }
    let mean = mean_of(&samples, d);
    log::info!("pCN acceptance rate {:.3}", state.acceptance_rate());
    Ok(ChainOutput { samples, mean, acceptance: state.acceptance_rate() })
}

pub fn mean_of(samples: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    let n = samples.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Evolution noise of the UKI dynamical system.
#[derive(Clone, Debug, PartialEq)]
pub enum Omega {
    Fixed(DMatrix<f64>),
    /// `Σ_ω = C_n`, so the predicted covariance is `(α² + 1) C_n`.
    Current,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UkiState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub alpha: f64,
    pub r0: DVector<f64>,
    pub omega: Omega,
    pub sigma_eta: DMatrix<f64>,
    /// Prior rows `(μ₀, Σ₀)` appended to the observation model.
    pub prior_rows: Option<(DVector<f64>, DMatrix<f64>)>,
    pub jitter_events: u64,
}

impl UkiState {
    /// Regularized UKI: `r₀ = m₀ = prior mean`, `C₀ = I`, `Σ_ω = (2 − α²) I`.
    pub fn regularized(prior_mean: &[f64], alpha: f64, sigma_eta: DMatrix<f64>) -> Result<Self> {
        let d = prior_mean.len();
        Self::check_alpha(alpha)?;
        let r0 = DVector::from_column_slice(prior_mean);
        Ok(Self {
            mean: r0.clone(),
            cov: DMatrix::identity(d, d),
            alpha,
            r0,
            omega: Omega::Fixed(DMatrix::identity(d, d) * (2.0 - alpha * alpha)),
            sigma_eta,
            prior_rows: None,
            jitter_events: 0,
        })
    }

    /// Prior-augmented UKI with `α = 1`, `Σ_ω = C_n` and doubled noise on the
    /// augmented rows; for linear forward maps its fixed point is the exact
    /// Gaussian posterior.
    pub fn bayesian(prior_mean: &[f64], prior_cov: DMatrix<f64>, sigma_eta: DMatrix<f64>) -> Self {
        let mut st = Self::posterior(prior_mean, prior_cov.clone(), sigma_eta);
        st.prior_rows = Some((st.r0.clone(), prior_cov * 2.0));
        st
    }

    /// `α = 1`, `Σ_ω = C_n`, doubled noise and no prior rows: a Gaussian
    /// approximation of `exp(−½‖G(ξ) − y‖²_Σ)` alone, started from `N(m₀, C₀)`.
    pub fn posterior(start_mean: &[f64], start_cov: DMatrix<f64>, sigma_eta: DMatrix<f64>) -> Self {
        let r0 = DVector::from_column_slice(start_mean);
        Self {
            mean: r0.clone(),
            cov: start_cov,
            alpha: 1.0,
            r0,
            omega: Omega::Current,
            sigma_eta: sigma_eta * 2.0,
            prior_rows: None,
            jitter_events: 0,
        }
    }

    fn check_alpha(alpha: f64) -> Result<()> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::config(format!("UKI alpha {alpha} must lie in (0, 1]")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Symmetric `2d + 1` sigma points `m, m ± √d Lᵢ` with `C = L Lᵀ`; the
/// centre has weight 0 and the rest `1/(2d)`.
pub fn sigma_points(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
    let d = mean.len();
    let chol = cov.clone().cholesky().ok_or_else(|| Error::numeric("sigma-point covariance is not positive definite"))?;
    let l = chol.l() * (d as f64).sqrt();
    let mut pts = Vec::with_capacity(2 * d + 1);
    pts.push(mean.clone());
    for j in 0..d {
        pts.push(mean + l.column(j));
    }
    for j in 0..d {
        pts.push(mean - l.column(j));
    }
    Ok(pts)
}

pub fn sigma_weights(d: usize) -> Vec<f64> {
    let mut w = vec![1.0 / (2 * d) as f64; 2 * d + 1];
    w[0] = 0.0;
    w
}

fn symmetrize(c: &mut DMatrix<f64>) {
    let t = c.transpose();
    *c = (&*c + t) * 0.5;
}

/// One predict/propagate/update cycle against data `y`.
pub fn uki_step(state: &mut UkiState, y: &[f64], forward: &EnsembleFn) -> Result<()> {
    let d = state.dim();
    let a = state.alpha;
    let m_hat = &state.r0 + (&state.mean - &state.r0) * a;
    let omega = match &state.omega {
        Omega::Fixed(o) => o.clone(),
        Omega::Current => state.cov.clone(),
    };
    let mut c_hat = &state.cov * (a * a) + omega;
    symmetrize(&mut c_hat);
    let pts = sigma_points(&m_hat, &c_hat)?;
    let w = sigma_weights(d);
    let inputs: Vec<Vec<f64>> = pts.iter().map(|p| p.as_slice().to_vec()).collect();
    let mut outs: Vec<DVector<f64>> = forward(&inputs)?.into_iter().map(DVector::from_vec).collect();
    let mut y_full = DVector::from_column_slice(y);
    let mut noise = state.sigma_eta.clone();
    if let Some((mu0, s0)) = &state.prior_rows {
        for (o, p) in outs.iter_mut().zip(&pts) {
            *o = DVector::from_iterator(o.len() + d, o.iter().chain(p.iter()).copied());
        }
        y_full = DVector::from_iterator(y.len() + d, y.iter().chain(mu0.iter()).copied());
        let (ny, nn) = (noise.nrows(), noise.nrows() + d);
        let mut big = DMatrix::zeros(nn, nn);
        big.view_mut((0, 0), (ny, ny)).copy_from(&noise);
        big.view_mut((ny, ny), (d, d)).copy_from(s0);
        noise = big;
    }
    let m = y_full.len();
    if outs.iter().any(|o| o.len() != m) || noise.nrows() != m {
        return Err(Error::shape(format!("UKI: forward outputs or noise do not match {m} observations")));
    }
    let mut y_hat = DVector::zeros(m);
    for (wi, o) in w.iter().zip(&outs) {
        y_hat += o * *wi;
    }
    let mut c_my = DMatrix::zeros(d, m);
    let mut c_yy = noise;
    for ((wi, p), o) in w.iter().zip(&pts).zip(&outs) {
        let dm = p - &m_hat;
        let dy = o - &y_hat;
        c_my += &dm * dy.transpose() * *wi;
        c_yy += &dy * dy.transpose() * *wi;
    }
    let gain_t = c_yy
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numeric("UKI observation covariance is not positive definite"))?
        .solve(&c_my.transpose());
    let gain = gain_t.transpose();
    state.mean = &m_hat + &gain * (y_full - y_hat);
    let mut cov = c_hat - &gain * c_my.transpose();
    symmetrize(&mut cov);
    if cov.clone().cholesky().is_none() {
        cov += DMatrix::identity(d, d) * 1e-10;
        state.jitter_events += 1;
        log::warn!("UKI covariance lost positive definiteness; added 1e-10 jitter");
    }
    state.cov = cov;
    if state.mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("UKI mean became non-finite"));
    }
    Ok(())
}

/// Runs `iters` UKI steps; returns the final mean.
pub fn uki_run(state: &mut UkiState, y: &[f64], forward: &EnsembleFn, iters: usize) -> Result<Vec<f64>> {
    for _ in 0..iters {
        uki_step(state, y, forward)?;
    }
    Ok(state.mean.as_slice().to_vec())
}

/// Draws from the Gaussian `N(mean, cov)` of a UKI state.
pub fn uki_samples(state: &UkiState, n: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let d = state.dim();
    let l = state.cov.clone().cholesky().ok_or_else(|| Error::numeric("UKI covariance is not positive definite"))?.l();
    Ok((0..n)
        .map(|_| {
            let z = DVector::from_vec(rng::normal_vec(rng, d));
            (&state.mean + &l * z).as_slice().to_vec()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvgdEnsemble {
    pub particles: Vec<Vec<f64>>,
    pub step: f64,
    history: Option<Vec<Vec<f64>>>,
}

impl SvgdEnsemble {
    pub fn new(particles: Vec<Vec<f64>>, step: f64) -> Result<Self> {
        if particles.len() < 2 {
            return Err(Error::config("SVGD needs at least two particles"));
        }
        Ok(Self { particles, step, history: None })
    }

    pub fn mean(&self) -> Vec<f64> {
        mean_of(&self.particles, self.particles[0].len())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `h = med² / ln n` from the median pairwise distance.
pub fn median_bandwidth(particles: &[Vec<f64>]) -> Result<f64> {
    let n = particles.len();
    if n < 2 {
        return Err(Error::config("bandwidth needs at least two particles"));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(sq_dist(&particles[i], &particles[j]).sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let k = dists.len();
    let med = if k % 2 == 1 { dists[k / 2] } else { 0.5 * (dists[k / 2 - 1] + dists[k / 2]) };
    Ok(med * med / (n as f64).ln())
}

/// Stein direction `φ(x_i)` for given log-density gradients.
pub fn svgd_direction(particles: &[Vec<f64>], grads: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let n = particles.len();
    let d = particles[0].len();
    let mut phi = vec![vec![0.0; d]; n];
    for (i, xi) in particles.iter().enumerate() {
        for (xj, gj) in particles.iter().zip(grads) {
            let k = (-sq_dist(xj, xi) / h).exp();
            for c in 0..d {
                phi[i][c] += k * gj[c] - 2.0 / h * (xj[c] - xi[c]) * k;
            }
        }
        phi[i].iter_mut().for_each(|v| *v /= n as f64);
    }
    phi
}

/// One SVGD update with AdaGrad-style per-coordinate step scaling.
pub fn svgd_step(ens: &mut SvgdEnsemble, grad_logp: &EnsembleFn) -> Result<()> {
    let h = median_bandwidth(&ens.particles)?;
    if h <= 0.0 {
        log::warn!("SVGD bandwidth is zero: particles coincide and the repulsion vanishes");
    }
    let h = if h > 0.0 { h } else { 1.0 };
    let grads = grad_logp(&ens.particles)?;
    let phi = svgd_direction(&ens.particles, &grads, h);
    let hist = ens.history.get_or_insert_with(|| phi.iter().map(|p| p.iter().map(|v| v * v).collect()).collect());
    for ((x, p), hs) in ens.particles.iter_mut().zip(&phi).zip(hist.iter_mut()) {
        for c in 0..x.len() {
            hs[c] = 0.9 * hs[c] + 0.1 * p[c] * p[c];
            x[c] += ens.step * p[c] / (1e-6 + hs[c].sqrt());
        }
    }
    if ens.particles.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::numeric("SVGD particles became non-finite"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StretchConfig {
    pub walkers: usize,
    pub burn: usize,
    pub steps: usize,
    /// Keep every `thin`-th post-burn-in ensemble.
    pub thin: usize,
    pub a: f64,
}

impl Default for StretchConfig {
    fn default() -> Self {
        Self { walkers: 1000, burn: 50_000, steps: 10_000, thin: 500, a: 2.0 }
    }
}

/// `y = x_j + z (x_k − x_j)`.
pub fn stretch_proposal(xk: &[f64], xj: &[f64], z: f64) -> Vec<f64> {
    xk.iter().zip(xj).map(|(k, j)| j + z * (k - j)).collect()
}

/// `(d − 1) ln z + log p(y) − log p(x_k)`.
pub fn stretch_log_accept(d: usize, z: f64, lp_new: f64, lp_old: f64) -> f64 {
    (d as f64 - 1.0) * z.ln() + lp_new - lp_old
}

/// `z ~ g(z) ∝ 1/√z` on `[1/a, a]`.
pub fn stretch_z(a: f64, rng: &mut Rng) -> f64 {
    let u: f64 = rng.gen();
    ((a - 1.0) * u + 1.0).powi(2) / a
}

/// Goodman-Weare ensemble sampler. `init` holds one starting point per walker.
pub fn ensemble_mcmc_run(
    logp: &(dyn Fn(&[f64]) -> f64 + Sync),
    init: Vec<Vec<f64>>,
    cfg: &StretchConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let n = init.len();
    let d = init.first().map_or(0, Vec::len);
    if n < 2 * d || n < 4 {
        return Err(Error::config(format!("{n} walkers is too few for dimension {d}")));
    }
    let mut r = rng::stream(seed, "stretch");
    let mut walkers = init;
    let mut lps: Vec<f64> = walkers.iter().map(|w| logp(w)).collect();
    let half = n / 2;
    let mut out = Vec::new();
    for step in 0..cfg.burn + cfg.steps {
        for (lo, hi, olo, ohi) in [(0, half, half, n), (half, n, 0, half)] {
            for k in lo..hi {
                let j = r.gen_range(olo..ohi);
                let z = stretch_z(cfg.a, &mut r);
                let y = stretch_proposal(&walkers[k], &walkers[j], z);
                let lp = logp(&y);
                let u: f64 = r.gen();
                if u.ln() < stretch_log_accept(d, z, lp, lps[k]) {
                    walkers[k] = y;
                    lps[k] = lp;
                }
            }
        }
        if step >= cfg.burn && (step - cfg.burn) % cfg.thin.max(1) == 0 {
            out.extend(walkers.iter().cloned());
        }
    }
    Ok(out)
}
