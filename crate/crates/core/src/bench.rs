//! Benchmark problems, evaluation metrics and the method pipelines compared
//! in the experiment tables.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{
    run_adaptive, stopping_check, LoopConfig, StageRecord, SurrogateStage,
};
use crate::difftensor::{Adam, Array, Tape, Var};
use crate::error::{Error, Result};
use crate::forward::{misfit, PdeKind, Problem};
use crate::randfield::KlBasis;
use rand::Rng as _;

use crate::rng::{self, Rng};
use crate::samplers::{
    ensemble_mcmc_run, mean_of, pcn_run, svgd_step, uki_samples, uki_step, PcnConfig, StretchConfig, SvgdEnsemble,
    UkiState,
};
use crate::surrogate::{
    finetune, pretrain, surrogate_fitting_error, FieldMap, FnoConfig, FnoModel, Surrogate, TrainConfig,
};
use crate::vfmodel::{LogTarget, VaeBaseline, VfConfig, VfModel};

pub const ROSENBROCK_DIM: usize = 100;
pub const LOG_CLAMP: f64 = -1e12;

/// `F(ξ₁, ξ₂) = (log(100(ξ₂ − ξ₁²)² + (1 − ξ₁)²)/0.3, ξ₁, ξ₂)`; `None` where the
/// logarithm's argument vanishes.
pub fn rosenbrock_f(x1: f64, x2: f64) -> Option<[f64; 3]> {
    let arg = 100.0 * (x2 - x1 * x1).powi(2) + (1.0 - x1).powi(2);
    if arg <= 0.0 {
        return None;
    }
    Some([arg.ln() / 0.3, x1, x2])
}

/// `−½‖F − y‖² − ½‖ξᶜ − Kξ‖²` with `K` the 98×100 all-ones matrix.
pub fn rosenbrock_logp(xi: &[f64]) -> f64 {
    assert_eq!(xi.len(), ROSENBROCK_DIM, "Rosenbrock target is 100-dimensional");
    let Some(f) = rosenbrock_f(xi[0], xi[1]) else {
        log::warn!("Rosenbrock log argument vanished at ({}, {}); clamping", xi[0], xi[1]);
        return LOG_CLAMP;
    };
    let y = [101f64.ln(), 0.0, 0.0];
    let data: f64 = f.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
    let total: f64 = xi.iter().sum();
    let coupling: f64 = xi[2..].iter().map(|c| (c - total).powi(2)).sum();
    (-0.5 * (data + coupling)).max(LOG_CLAMP)
}

/// Residual map `G(ξ) = (F(ξ₁, ξ₂), ξᶜ − Kξ)` with data `(log 101, 0, …, 0)`.
pub fn rosenbrock_residual_map(xi: &[f64]) -> Vec<f64> {
    let f = rosenbrock_f(xi[0], xi[1]).unwrap_or([LOG_CLAMP.sqrt(), xi[0], xi[1]]);
    let total: f64 = xi.iter().sum();
    f.iter().copied().chain(xi[2..].iter().map(|c| c - total)).collect()
}

pub fn rosenbrock_data() -> Vec<f64> {
    let mut y = vec![0.0; 3 + ROSENBROCK_DIM - 2];
    y[0] = 101f64.ln();
    y
}

/// Tape version of [`rosenbrock_logp`] for VF training.
pub struct RosenbrockTarget;

impl LogTarget for RosenbrockTarget {
    fn dim(&self) -> usize {
        ROSENBROCK_DIM
    }

    fn log_prob(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        let x1 = tape.slice_last(x, 0, 1)?;
        let x2 = tape.slice_last(x, 1, 1)?;
        let xc = tape.slice_last(x, 2, ROSENBROCK_DIM - 2)?;
        let x1sq = tape.square(x1)?;
        let a = tape.sub(x2, x1sq)?;
        let a = tape.square(a)?;
        let a = tape.scale(a, 100.0)?;
        let b = tape.neg(x1)?;
        let b = tape.add_scalar(b, 1.0)?;
        let b = tape.square(b)?;
        let arg = tape.add(a, b)?;
        let f1 = tape.log(arg)?;
        let f1 = tape.scale(f1, 1.0 / 0.3)?;
        let r1 = tape.add_scalar(f1, -101f64.ln())?;
        let r1 = tape.square(r1)?;
        let r2 = tape.square(x1)?;
        let r3 = tape.square(x2)?;
        let total = tape.sum_axis(x, 1)?;
        let total = tape.reshape(total, &[n, 1])?;
        let total = tape.broadcast_to(total, &[n, ROSENBROCK_DIM - 2])?;
        let c = tape.sub(xc, total)?;
        let c = tape.square(c)?;
        let c = tape.sum_axis(c, 1)?;
        let c = tape.reshape(c, &[n, 1])?;
        let s = tape.add(r1, r2)?;
        let s = tape.add(s, r3)?;
        let s = tape.add(s, c)?;
        let s = tape.reshape(s, &[n])?;
        tape.scale(s, -0.5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RosenbrockMethod {
    Vf,
    Vae,
    Mcmc,
    Uki,
    Svgd,
}

impl RosenbrockMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vf" => Ok(Self::Vf),
            "vae" => Ok(Self::Vae),
            "mcmc" => Ok(Self::Mcmc),
            "uki" => Ok(Self::Uki),
            "svgd" => Ok(Self::Svgd),
            other => Err(Error::config(format!("unknown Rosenbrock method `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Vf => "vf",
            Self::Vae => "vae",
            Self::Mcmc => "mcmc",
            Self::Uki => "uki",
            Self::Svgd => "svgd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RosenbrockConfig {
    /// Rows emitted by every method.
    pub samples: usize,
    pub latent: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Model draws per epoch.
    pub epoch_samples: usize,
    pub batch: usize,
    pub mcmc: StretchConfig,
    pub svgd_particles: usize,
    pub svgd_iters: usize,
    pub svgd_step: f64,
    pub uki_iters: usize,
}

impl Default for RosenbrockConfig {
    fn default() -> Self {
        Self {
            samples: 20_000,
            latent: 16,
            lr: 1e-3,
            epochs: 20_000,
            epoch_samples: 100_000,
            batch: 10_000,
            mcmc: StretchConfig::default(),
            svgd_particles: 20_000,
            svgd_iters: 10_000,
            svgd_step: 1e-2,
            uki_iters: 500,
        }
    }
}

impl RosenbrockConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 2000,
            epoch_samples: 1024,
            batch: 512,
            svgd_particles: 1000,
            svgd_iters: 1000,
            ..Self::default()
        }
    }

    fn steps(&self) -> usize {
        self.epochs * (self.epoch_samples / self.batch.max(1)).max(1)
    }
}

/// Draws `cfg.samples` points from the chosen approximation of the
/// Rosenbrock posterior. SVGD ensembles smaller than `cfg.samples` are
/// resampled uniformly with replacement.
pub fn run_rosenbrock(method: RosenbrockMethod, cfg: &RosenbrockConfig, seed: u64) -> Result<Vec<Vec<f64>>> {
    let d = ROSENBROCK_DIM;
    let mut r = rng::stream(seed, &format!("rosenbrock-{}", method.name()));
    let rows = |a: Array| a.data().chunks(d).map(<[f64]>::to_vec).collect::<Vec<_>>();
    match method {
        RosenbrockMethod::Vf => {
            let vcfg = VfConfig::new(d, cfg.latent);
            let mut vf = VfModel::new(&vcfg, &mut r)?;
            let mut adam = Adam::new(cfg.lr);
            for step in 0..cfg.steps() {
                let loss = vf.train_step(&mut adam, &RosenbrockTarget, cfg.batch, &mut r)?;
                if !loss.is_finite() {
                    return Err(Error::numeric(format!("VF loss became {loss} at step {step}")));
                }
            }
            Ok(rows(vf.sample(cfg.samples, &mut r)?))
        }
        RosenbrockMethod::Vae => {
            let vcfg = VfConfig::new(d, cfg.latent);
            let n_vf = VfModel::new(&vcfg, &mut rng::seeded(0))?.params.n_scalars();
            let mut vae = VaeBaseline::matched(&vcfg, n_vf, &mut r);
            let mut adam = Adam::new(cfg.lr);
            for step in 0..cfg.steps() {
                let loss = vae.train_step(&mut adam, &RosenbrockTarget, cfg.batch, &mut r)?;
                if !loss.is_finite() {
                    return Err(Error::numeric(format!("VAE loss became {loss} at step {step}")));
                }
            }
            Ok(rows(vae.sample(cfg.samples, &mut r)?))
        }
        RosenbrockMethod::Mcmc => {
            let init = (0..cfg.mcmc.walkers).map(|_| rng::normal_vec(&mut r, d)).collect();
            let out = ensemble_mcmc_run(&rosenbrock_logp, init, &cfg.mcmc, seed)?;
            Ok(out.into_iter().take(cfg.samples).collect())
        }
        RosenbrockMethod::Uki => {
            let y = rosenbrock_data();
            let mut st = UkiState::posterior(&vec![0.0; d], DMatrix::identity(d, d), DMatrix::identity(y.len(), y.len()));
            let g = |xs: &[Vec<f64>]| Ok(xs.par_iter().map(|x| rosenbrock_residual_map(x)).collect());
            for _ in 0..cfg.uki_iters {
                uki_step(&mut st, &y, &g)?;
            }
            uki_samples(&st, cfg.samples, &mut r)
        }
        RosenbrockMethod::Svgd => {
            let init = (0..cfg.svgd_particles).map(|_| rng::normal_vec(&mut r, d)).collect();
            let mut ens = SvgdEnsemble::new(init, cfg.svgd_step)?;
            let grad = |xs: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
                let mut tape = Tape::new();
                let x = tape.variable(Array::from_rows(xs)?);
                let lp = RosenbrockTarget.log_prob(&mut tape, x)?;
                let s = tape.sum(lp)?;
                let g = tape.backward(s)?;
                Ok(rows(g.get(x).expect("input reaches the log density").clone()))
            };
            for _ in 0..cfg.svgd_iters {
                svgd_step(&mut ens, &grad)?;
            }
            let n = ens.particles.len();
            if n >= cfg.samples {
                return Ok(ens.particles.into_iter().take(cfg.samples).collect());
            }
            Ok((0..cfg.samples).map(|_| ens.particles[r.gen_range(0..n)].clone()).collect())
        }
    }
}

/// `(ξ₁, ξ₂)` of each sample.
pub fn leading_pair(samples: &[Vec<f64>]) -> Vec<[f64; 2]> {
    samples.iter().map(|s| [s[0], s[1]]).collect()
}

/// The two highest local maxima of a Gaussian kernel density estimate of
/// `(ξ₁, ξ₂)`, sorted by `ξ₂`. The estimate bins the points on a 200×200
/// grid and smooths with Scott's bandwidth.
pub fn mode_centers(points: &[[f64; 2]]) -> Result<[[f64; 2]; 2]> {
    const G: usize = 200;
    if points.len() < 2 {
        return Err(Error::config("mode search needs at least two points"));
    }
    let n = points.len() as f64;
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut mean = [0.0; 2];
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
            mean[a] += p[a] / n;
        }
    }
    let mut bw = [0.0; 2];
    for a in 0..2 {
        let var = points.iter().map(|p| (p[a] - mean[a]).powi(2)).sum::<f64>() / (n - 1.0);
        bw[a] = var.sqrt() * n.powf(-1.0 / 6.0);
        if !(bw[a] > 0.0) || !bw[a].is_finite() {
            return Err(Error::numeric("points have no spread along an axis"));
        }
        lo[a] -= 3.0 * bw[a];
        hi[a] += 3.0 * bw[a];
    }
    let step = [(hi[0] - lo[0]) / G as f64, (hi[1] - lo[1]) / G as f64];
    let cell = |v: f64, a: usize| (((v - lo[a]) / step[a]) as usize).min(G - 1);
    let mut hist = vec![0.0; G * G];
    for p in points {
        hist[cell(p[0], 0) * G + cell(p[1], 1)] += 1.0;
    }
    // Separable Gaussian smoothing, axis 1 then axis 0.
    let kernel = |a: usize| -> Vec<f64> {
        let s = bw[a] / step[a];
        let r = (4.0 * s).ceil() as isize;
        (-r..=r).map(|i| (-0.5 * (i as f64 / s).powi(2)).exp()).collect()
    };
    let smooth = |src: &[f64], k: &[f64], along_rows: bool| -> Vec<f64> {
        let r = (k.len() / 2) as isize;
        let mut out = vec![0.0; G * G];
        for i in 0..G {
            for j in 0..G {
                let mut acc = 0.0;
                for (t, w) in k.iter().enumerate() {
                    let o = t as isize - r;
                    let (ii, jj) = if along_rows { (i as isize, j as isize + o) } else { (i as isize + o, j as isize) };
                    if (0..G as isize).contains(&ii) && (0..G as isize).contains(&jj) {
                        acc += w * src[ii as usize * G + jj as usize];
                    }
                }
                out[i * G + j] = acc;
            }
        }
        out
    };
    let dens = smooth(&smooth(&hist, &kernel(1), true), &kernel(0), false);
    let mut peaks: Vec<(f64, [f64; 2])> = Vec::new();
    for i in 1..G - 1 {
        for j in 1..G - 1 {
            let v = dens[i * G + j];
            let is_peak = (-1isize..=1).all(|di| {
                (-1isize..=1).all(|dj| {
                    let w = dens[(i as isize + di) as usize * G + (j as isize + dj) as usize];
                    (di == 0 && dj == 0) || v > w
                })
            });
            if is_peak {
                peaks.push((v, [lo[0] + (i as f64 + 0.5) * step[0], lo[1] + (j as f64 + 0.5) * step[1]]));
            }
        }
    }
    if peaks.len() < 2 {
        return Err(Error::numeric(format!("density estimate has {} local maxima, need two", peaks.len())));
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut c = [peaks[0].1, peaks[1].1];
    c.sort_by(|a, b| a[1].total_cmp(&b[1]));
    Ok(c)
}

/// Fraction of points within `radius` of each centre.
pub fn mode_coverage(points: &[[f64; 2]], centers: &[[f64; 2]; 2], radius: f64) -> [f64; 2] {
    let mut hits = [0usize; 2];
    for p in points {
        for (k, c) in centers.iter().enumerate() {
            if ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() <= radius {
                hits[k] += 1;
            }
        }
    }
    let n = points.len().max(1) as f64;
    [hits[0] as f64 / n, hits[1] as f64 / n]
}

/// `‖m_μ − m_ref‖ / ‖m_ref‖` in the grid L² norm of `basis`.
pub fn inversion_error(mu: &[f64], reference: &Array, basis: &KlBasis) -> Result<f64> {
    let m = basis.synthesize(mu)?;
    if m.len() != reference.len() {
        return Err(Error::shape(format!("reference has {} points, basis grid {}", reference.len(), m.len())));
    }
    let w = basis.quadrature_weights();
    let num: f64 = m.data().iter().zip(reference.data()).zip(&w).map(|((a, b), w)| w * (a - b).powi(2)).sum();
    let den: f64 = reference.data().iter().zip(&w).map(|(b, w)| w * b * b).sum();
    if den == 0.0 {
        return Err(Error::config("reference field has zero norm"));
    }
    Ok((num / den).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ours,
    Pcn,
    UkiFdm,
    UkiFno,
    SvgdFno,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Ours, Method::Pcn, Method::UkiFdm, Method::UkiFno, Method::SvgdFno];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(Self::Ours),
            "pcn" => Ok(Self::Pcn),
            "uki-fdm" => Ok(Self::UkiFdm),
            "uki-fno" => Ok(Self::UkiFno),
            "svgd-fno" => Ok(Self::SvgdFno),
            other => Err(Error::config(format!("unknown method `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ours => "ours",
            Self::Pcn => "pcn",
            Self::UkiFdm => "uki-fdm",
            Self::UkiFno => "uki-fno",
            Self::SvgdFno => "svgd-fno",
        }
    }

    pub fn uses_surrogate(self) -> bool {
        matches!(self, Self::Ours | Self::UkiFno | Self::SvgdFno)
    }
}

pub fn kind_name(kind: PdeKind) -> &'static str {
    match kind {
        PdeKind::Darcy1d => "darcy1d",
        PdeKind::Darcy2d => "darcy2d",
        PdeKind::Ns2d => "ns2d",
    }
}

pub fn parse_kind(s: &str) -> Result<PdeKind> {
    match s {
        "darcy1d" => Ok(PdeKind::Darcy1d),
        "darcy2d" => Ok(PdeKind::Darcy2d),
        "ns2d" => Ok(PdeKind::Ns2d),
        other => Err(Error::config(format!("unknown problem `{other}`"))),
    }
}

/// Settings for every pipeline of the comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Surrogate grid points per axis; `0` picks the problem default.
    pub surrogate_grid: usize,
    /// Overrides the FNO width when non-zero.
    pub fno_width: usize,
    pub pretrain_size: usize,
    pub pretrain: TrainConfig,
    pub adaptive: LoopConfig,
    pub pcn: PcnConfig,
    pub uki_alpha: f64,
    /// UKI iterations for the exact solver.
    pub uki_iters: usize,
    /// UKI iterations between surrogate refinements.
    pub uki_steps_per_stage: usize,
    pub svgd_particles: usize,
    pub svgd_stages: usize,
    pub svgd_steps_per_stage: usize,
    pub svgd_step: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            surrogate_grid: 0,
            fno_width: 0,
            pretrain_size: 2000,
            pretrain: TrainConfig::pretrain(),
            adaptive: LoopConfig::default(),
            pcn: PcnConfig::default(),
            uki_alpha: 0.5,
            uki_iters: 50,
            uki_steps_per_stage: 10,
            svgd_particles: 100,
            svgd_stages: 20,
            svgd_steps_per_stage: 50,
            svgd_step: 1e-2,
        }
    }
}

impl PipelineConfig {
    /// Desk-scale budget: shorter FNO schedules, narrower 1D network.
    pub fn desk() -> Self {
        Self {
            fno_width: 32,
            pretrain: TrainConfig::pretrain().rescaled(40),
            adaptive: LoopConfig::desk(),
            ..Self::default()
        }
    }

    pub fn grid_for(&self, kind: PdeKind) -> usize {
        if self.surrogate_grid > 0 {
            return self.surrogate_grid;
        }
        match kind {
            PdeKind::Darcy1d => 65,
            PdeKind::Darcy2d => 71,
            PdeKind::Ns2d => 64,
        }
    }

    pub fn fno_config(&self, kind: PdeKind) -> FnoConfig {
        let mut c = FnoConfig::for_kind(kind, self.grid_for(kind));
        if self.fno_width > 0 {
            c.width = self.fno_width;
        }
        c
    }
}

/// Pre-trained surrogate and the number of pairs it consumed.
pub fn pretrain_surrogate(kind: PdeKind, d: usize, cfg: &PipelineConfig, seed: u64) -> Result<(Surrogate, Vec<f64>)> {
    let map = FieldMap::new(kind, d, cfg.grid_for(kind))?;
    let data = map.prior_dataset(cfg.pretrain_size, seed)?;
    let mut model = FnoModel::new(&cfg.fno_config(kind), &mut rng::stream(seed, "fno-init"))?;
    let history = pretrain(&mut model, &data, &cfg.pretrain, &mut rng::stream(seed, "fno-pretrain"))?;
    Ok((Surrogate::new(model, map)?, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub problem: String,
    pub method: String,
    pub d: usize,
    pub delta: f64,
    pub repeat: usize,
    pub seed: u64,
    pub e_i: f64,
    pub e_s_final: Option<f64>,
    pub stages_run: usize,
    pub converged: bool,
}

pub const REPORT_HEADER: &str = "problem,method,d,delta,repeat,e_I,e_S_final,stages_run,converged";

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.17e},{},{},{}",
            self.problem,
            self.method,
            self.d,
            self.delta,
            self.repeat,
            self.e_i,
            self.e_s_final.map_or(String::new(), |v| format!("{v:.17e}")),
            self.stages_run,
            self.converged
        )
    }
}

/// Everything one method run produces.
pub struct MethodOutput {
    pub report: MetricReport,
    pub mu_post: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
    pub stage_log: Vec<StageRecord>,
}

fn report(problem: &Problem, method: Method, repeat: usize, seed: u64, mu: &[f64]) -> Result<MetricReport> {
    Ok(MetricReport {
        problem: kind_name(problem.forward.kind).into(),
        method: method.name().into(),
        d: problem.d(),
        delta: problem.delta,
        repeat,
        seed,
        e_i: inversion_error(mu, &problem.reference_field, &problem.forward.basis)?,
        e_s_final: None,
        stages_run: 0,
        converged: true,
    })
}

fn noise_matrix(problem: &Problem) -> DMatrix<f64> {
    DMatrix::from_diagonal(&nalgebra::DVector::from_vec(problem.likelihood.noise_var.clone()))
}

/// Runs one method on one problem. Surrogate methods start from a clone of
/// `pretrained`.
pub fn run_method(
    problem: &Problem,
    method: Method,
    cfg: &PipelineConfig,
    pretrained: Option<&Surrogate>,
    repeat: usize,
    seed: u64,
) -> Result<MethodOutput> {
    let d = problem.d();
    let need = || pretrained.cloned().ok_or_else(|| Error::config(format!("{} needs a pre-trained surrogate", method.name())));
    let first_id = cfg.pretrain_size as u64;
    match method {
        Method::Ours => {
            let mut stage = SurrogateStage::new(problem, need()?, first_id)?;
            let out = run_adaptive(&mut stage, &cfg.adaptive, seed)?;
            let mut rep = report(problem, method, repeat, seed, &out.mu_post)?;
            rep.e_s_final = out.log.last().and_then(|r| r.e_s);
            rep.stages_run = out.log.len();
            rep.converged = out.converged;
            let samples = out.vf.sample(cfg.adaptive.m, &mut rng::stream(seed, "final-samples"))?;
            let samples = samples.data().chunks(d).map(<[f64]>::to_vec).collect();
            Ok(MethodOutput { report: rep, mu_post: out.mu_post, samples, stage_log: out.log })
        }
        Method::Pcn => {
            let fwd = &problem.forward;
            let lik = &problem.likelihood;
            let phi = |xi: &[f64]| misfit(&fwd.forward(xi)?, lik);
            let out = pcn_run(&vec![0.0; d], &phi, &cfg.pcn, seed)?;
            let rep = report(problem, method, repeat, seed, &out.mean)?;
            Ok(MethodOutput { report: rep, mu_post: out.mean, samples: out.samples, stage_log: Vec::new() })
        }
        Method::UkiFdm => {
            let mut st = UkiState::regularized(&vec![0.0; d], cfg.uki_alpha, noise_matrix(problem))?;
            let fwd = &problem.forward;
            let f = |xs: &[Vec<f64>]| fwd.forward_batch(xs);
            for _ in 0..cfg.uki_iters {
                uki_step(&mut st, &problem.likelihood.y, &f)?;
            }
            let mu = st.mean.as_slice().to_vec();
            let rep = report(problem, method, repeat, seed, &mu)?;
            let samples = uki_samples(&st, cfg.adaptive.m, &mut rng::stream(seed, "uki-samples"))?;
            Ok(MethodOutput { report: rep, mu_post: mu, samples, stage_log: Vec::new() })
        }
        Method::UkiFno => run_uki_fno(problem, cfg, need()?, repeat, seed),
        Method::SvgdFno => run_svgd_fno(problem, cfg, need()?, repeat, seed),
    }
}

fn perturbed_dataset(
    surrogate: &Surrogate,
    centres: &[Vec<f64>],
    m: usize,
    gamma: f64,
    first_id: u64,
    r: &mut Rng,
) -> Result<crate::surrogate::Dataset> {
    let xis: Vec<Vec<f64>> = (0..m)
        .map(|j| centres[j % centres.len()].iter().map(|x| x + gamma * rng::normal(r)).collect())
        .collect();
    surrogate.map.dataset(&xis, first_id)
}

fn run_uki_fno(problem: &Problem, cfg: &PipelineConfig, mut surrogate: Surrogate, repeat: usize, seed: u64) -> Result<MethodOutput> {
    let d = problem.d();
    let lc = &cfg.adaptive;
    let mut st = UkiState::regularized(&vec![0.0; d], cfg.uki_alpha, noise_matrix(problem))?;
    let exact_phi = |xi: &[f64]| misfit(&problem.forward.forward(xi)?, &problem.likelihood);
    let mut phi_prev = exact_phi(st.mean.as_slice())?;
    let mut log = Vec::new();
    let mut converged = false;
    let mut next_id = cfg.pretrain_size as u64;
    let mut r = rng::stream(seed, "uki-fno");
    for stage in 1..=lc.k_max {
        let start = std::time::Instant::now();
        let s = &surrogate;
        let e_s = surrogate_fitting_error(&|x| s.states(x), &s.map, &problem.reference_xi, lc.fitting_points, seed + stage as u64)?;
        let f = |xs: &[Vec<f64>]| s.forward_batch(xs);
        for _ in 0..cfg.uki_steps_per_stage {
            uki_step(&mut st, &problem.likelihood.y, &f)?;
        }
        let mean = st.mean.as_slice().to_vec();
        let phi = exact_phi(&mean)?;
        log.push(StageRecord {
            stage,
            epochs: cfg.uki_steps_per_stage,
            vf_loss: f64::NAN,
            phi_prior_exact: phi,
            e_i: Some(inversion_error(&mean, &problem.reference_field, &problem.forward.basis)?),
            e_s: Some(e_s),
            wallclock_s: start.elapsed().as_secs_f64(),
        });
        if stopping_check(phi_prev, phi, lc.epsilon) {
            converged = true;
            break;
        }
        phi_prev = phi;
        if stage < lc.k_max {
            let centres = uki_samples(&st, lc.m, &mut r)?;
            let data = perturbed_dataset(&surrogate, &centres, lc.m, lc.gamma, next_id, &mut r)?;
            next_id += data.len() as u64;
            finetune(&mut surrogate.model, &data, &lc.finetune, &mut r)?;
        }
    }
    let mu = st.mean.as_slice().to_vec();
    let mut rep = report(problem, Method::UkiFno, repeat, seed, &mu)?;
    rep.e_s_final = log.last().and_then(|l| l.e_s);
    rep.stages_run = log.len();
    rep.converged = converged;
    let samples = uki_samples(&st, lc.m, &mut rng::stream(seed, "uki-samples"))?;
    Ok(MethodOutput { report: rep, mu_post: mu, samples, stage_log: log })
}

/// `∇ log p̂` of the surrogate posterior with the fixed prior `N(0, I)`.
fn surrogate_grad_logp(surrogate: &Surrogate, problem: &Problem, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = problem.d();
    let target = crate::adaptive::PosteriorTarget { forward: surrogate, likelihood: &problem.likelihood, prior_mean: vec![0.0; d] };
    xs.par_chunks(32)
        .map(|chunk| {
            let mut tape = Tape::new();
            let x = tape.variable(Array::new(vec![chunk.len(), d], chunk.concat())?);
            let lp = target.log_prob(&mut tape, x)?;
            let s = tape.sum(lp)?;
            let g = tape.backward(s)?;
            let g = g.get(x).expect("input reaches the log density");
            Ok(g.data().chunks(d).map(<[f64]>::to_vec).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.concat())
}

fn run_svgd_fno(problem: &Problem, cfg: &PipelineConfig, mut surrogate: Surrogate, repeat: usize, seed: u64) -> Result<MethodOutput> {
    let d = problem.d();
    let lc = &cfg.adaptive;
    let mut r = rng::stream(seed, "svgd-fno");
    let init = (0..cfg.svgd_particles).map(|_| rng::normal_vec(&mut r, d)).collect();
    let mut ens = SvgdEnsemble::new(init, cfg.svgd_step)?;
    let mut log = Vec::new();
    let mut next_id = cfg.pretrain_size as u64;
    for stage in 1..=cfg.svgd_stages {
        let start = std::time::Instant::now();
        let s = &surrogate;
        let e_s = surrogate_fitting_error(&|x| s.states(x), &s.map, &problem.reference_xi, lc.fitting_points, seed + stage as u64)?;
        let grad = |xs: &[Vec<f64>]| surrogate_grad_logp(s, problem, xs);
        for _ in 0..cfg.svgd_steps_per_stage {
            svgd_step(&mut ens, &grad)?;
        }
        let mean = ens.mean();
        log.push(StageRecord {
            stage,
            epochs: cfg.svgd_steps_per_stage,
            vf_loss: f64::NAN,
            phi_prior_exact: misfit(&problem.forward.forward(&mean)?, &problem.likelihood)?,
            e_i: Some(inversion_error(&mean, &problem.reference_field, &problem.forward.basis)?),
            e_s: Some(e_s),
            wallclock_s: start.elapsed().as_secs_f64(),
        });
        if stage < cfg.svgd_stages {
            let data = perturbed_dataset(&surrogate, &ens.particles, lc.m, lc.gamma, next_id, &mut r)?;
            next_id += data.len() as u64;
            finetune(&mut surrogate.model, &data, &lc.finetune, &mut r)?;
        }
    }
    let mu = ens.mean();
    let mut rep = report(problem, Method::SvgdFno, repeat, seed, &mu)?;
    rep.e_s_final = log.last().and_then(|l| l.e_s);
    rep.stages_run = log.len();
    rep.converged = true;
    Ok(MethodOutput { report: rep, mu_post: mu, samples: ens.particles.clone(), stage_log: log })
}

/// One cell of the comparison matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub problem: PdeKind,
    pub d: usize,
    pub delta: f64,
    pub method: Method,
}

/// Runs every cell `repeats` times. Failed cells are reported and skipped.
/// Repeat `r` of a cell uses seed `seed + r` for the problem and the method.
pub fn run_matrix(cells: &[Cell], repeats: usize, cfg: &PipelineConfig, seed: u64) -> (Vec<MetricReport>, Vec<String>) {
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    let mut surrogates: Vec<((PdeKind, usize, u64), Surrogate)> = Vec::new();
    for cell in cells {
        for rep in 0..repeats {
            let s = seed + rep as u64;
            let result = (|| -> Result<MetricReport> {
                let problem = Problem::generate(cell.problem, cell.d, cell.delta, s)?;
                let pre = if cell.method.uses_surrogate() {
                    let key = (cell.problem, cell.d, s);
                    if let Some((_, sur)) = surrogates.iter().find(|(k, _)| *k == key) {
                        Some(sur.clone())
                    } else {
                        let (sur, _) = pretrain_surrogate(cell.problem, cell.d, cfg, s)?;
                        surrogates.push((key, sur.clone()));
                        Some(sur)
                    }
                } else {
                    None
                };
                Ok(run_method(&problem, cell.method, cfg, pre.as_ref(), rep, s)?.report)
            })();
            match result {
                Ok(r) => reports.push(r),
                Err(e) => failures.push(format!(
                    "{} {} d={} delta={} repeat {rep}: {e}",
                    kind_name(cell.problem),
                    cell.method.name(),
                    cell.d,
                    cell.delta
                )),
            }
        }
    }
    (reports, failures)
}

/// Per-repeat rows followed by one `mean` row per cell.
pub fn report_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    let mut keys: Vec<(String, String, usize, String)> = Vec::new();
    for r in reports {
        let k = (r.problem.clone(), r.method.clone(), r.d, format!("{}", r.delta));
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    for (p, m, d, delta) in keys {
        let rows: Vec<&MetricReport> =
            reports.iter().filter(|r| r.problem == p && r.method == m && r.d == d && format!("{}", r.delta) == delta).collect();
        let n = rows.len() as f64;
        let e_i = rows.iter().map(|r| r.e_i).sum::<f64>() / n;
        let e_s: Vec<f64> = rows.iter().filter_map(|r| r.e_s_final).collect();
        let e_s = if e_s.is_empty() { String::new() } else { format!("{:.17e}", e_s.iter().sum::<f64>() / e_s.len() as f64) };
        s.push_str(&format!("{p},{m},{d},{delta},mean,{e_i:.17e},{e_s},,\n"));
    }
    s
}

/// Posterior mean estimate from a sample set.
pub fn sample_mean(samples: &[Vec<f64>]) -> Vec<f64> {
    mean_of(samples, samples.first().map_or(0, Vec::len))
}
