//! The adaptive inference loop: VF training against a surrogate posterior with
//! iterative prior-mean updates, data replacement around the VF posterior and
//! surrogate fine-tuning.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::inversion_error;
use crate::difftensor::{Adam, Array, Bound, Tape, Var};
use crate::error::{Error, Result};
use crate::forward::{misfit, Likelihood, Problem};
use crate::rng::{self, Rng};
use crate::surrogate::{finetune, surrogate_fitting_error, Dataset, FieldMap, Surrogate, TrainConfig};
use crate::vfmodel::{LogTarget, VfConfig, VfModel};

/// A forward map that can be evaluated on a tape, `[B, d] -> [B, m]`.
pub trait DiffForward: Sync {
    fn dim(&self) -> usize;
    fn observe(&self, tape: &mut Tape, xi: Var) -> Result<Var>;
}

impl DiffForward for Surrogate {
    fn dim(&self) -> usize {
        self.map.d()
    }

    fn observe(&self, tape: &mut Tape, xi: Var) -> Result<Var> {
        let p: Bound = self.model.params.bind_frozen(tape);
        Surrogate::observe(self, tape, &p, xi)
    }
}

/// `G(ξ) = A ξ` with `A: [m, d]`.
#[derive(Clone, Debug)]
pub struct LinearForward {
    pub a: Array,
}

impl LinearForward {
    pub fn apply(&self, xi: &[f64]) -> Vec<f64> {
        let d = self.a.shape()[1];
        self.a.data().chunks(d).map(|row| row.iter().zip(xi).map(|(a, x)| a * x).sum()).collect()
    }
}

impl DiffForward for LinearForward {
    fn dim(&self) -> usize {
        self.a.shape()[1]
    }

    fn observe(&self, tape: &mut Tape, xi: Var) -> Result<Var> {
        let (m, d) = (self.a.shape()[0], self.a.shape()[1]);
        let mut at = vec![0.0; d * m];
        for i in 0..m {
            for j in 0..d {
                at[j * m + i] = self.a.at2(i, j);
            }
        }
        let at = tape.constant(Array::new(vec![d, m], at)?);
        tape.matmul(xi, at)
    }
}

/// `log p̂(ξ) = −Φ(ξ) − ½‖ξ − μ_prior‖²` with `Φ` from a differentiable forward map.
pub struct PosteriorTarget<'a> {
    pub forward: &'a dyn DiffForward,
    pub likelihood: &'a Likelihood,
    pub prior_mean: Vec<f64>,
}

impl LogTarget for PosteriorTarget<'_> {
    fn dim(&self) -> usize {
        self.forward.dim()
    }

    fn log_prob(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        let g = self.forward.observe(tape, x)?;
        let m = self.likelihood.y.len();
        let y = tape.constant(Array::from_vec(self.likelihood.y.clone()));
        let y = tape.broadcast_to(y, &[n, m])?;
        let r = tape.sub(g, y)?;
        let inv_sd: Vec<f64> = self.likelihood.noise_var.iter().map(|v| 1.0 / v.sqrt()).collect();
        let inv_sd = tape.constant(Array::from_vec(inv_sd));
        let inv_sd = tape.broadcast_to(inv_sd, &[n, m])?;
        let r = tape.mul(r, inv_sd)?;
        let r2 = tape.square(r)?;
        let phi = tape.sum_axis(r2, 1)?;
        let d = self.prior_mean.len();
        let mu = tape.constant(Array::from_vec(self.prior_mean.clone()));
        let mu = tape.broadcast_to(mu, &[n, d])?;
        let dx = tape.sub(x, mu)?;
        let dx2 = tape.square(dx)?;
        let prior = tape.sum_axis(dx2, 1)?;
        let total = tape.add(phi, prior)?;
        tape.scale(total, -0.5)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    pub k_max: usize,
    pub n_e: usize,
    pub m: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub vf_lr: f64,
    pub batch: usize,
    pub stage_samples: usize,
    pub latent: usize,
    pub finetune: TrainConfig,
    /// Perturbed points used for the surrogate fitting error.
    pub fitting_points: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            k_max: 20,
            n_e: 10,
            m: 500,
            alpha: 0.5,
            gamma: 3.0,
            epsilon: 0.01,
            vf_lr: 1e-3,
            batch: 32,
            stage_samples: 1024,
            latent: 16,
            finetune: TrainConfig::finetune(),
            fitting_points: 100,
        }
    }
}

impl LoopConfig {
    /// Desk-scale budget: shorter fine-tuning, otherwise the published values.
    pub fn desk() -> Self {
        Self { finetune: TrainConfig::finetune().rescaled(20), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(format!("alpha {} must lie in (0, 1]", self.alpha)));
        }
        if !(self.gamma >= 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::config("gamma must be non-negative and epsilon positive"));
        }
        if self.m == 0 || self.batch == 0 || self.k_max == 0 || self.n_e == 0 {
            return Err(Error::config("sample counts, batch, stages and epochs must be positive"));
        }
        Ok(())
    }
}

/// `α μ_post + (1 − α) μ_prev`.
pub fn update_prior_mean(mu_post: &[f64], mu_prev: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if mu_post.len() != mu_prev.len() {
        return Err(Error::shape("prior update needs equal-length means"));
    }
    Ok(mu_post.iter().zip(mu_prev).map(|(p, q)| alpha * p + (1.0 - alpha) * q).collect())
}

pub fn estimate_posterior_mean(vf: &VfModel, m: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::config("posterior mean needs at least one sample"));
    }
    vf.posterior_mean(m, rng)
}

/// `|Φ_prev − Φ_curr| / Φ_prev < ε`; a zero previous misfit counts as converged.
pub fn stopping_check(phi_prev: f64, phi_curr: f64, epsilon: f64) -> bool {
    if phi_prev == 0.0 {
        log::info!("misfit at the prior mean is zero; stopping");
        return true;
    }
    (phi_prev - phi_curr).abs() / phi_prev < epsilon
}

/// `ξ̂ = ξ + γ ν` for `m` VF draws.
pub fn perturbed_samples(vf: &VfModel, m: usize, gamma: f64, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let s = vf.sample(m, rng)?;
    Ok(s.data().chunks(vf.d).map(|row| row.iter().map(|x| x + gamma * rng::normal(rng)).collect()).collect())
}

/// Fresh pairs around the VF posterior. A sample whose exact solve fails is
/// redrawn up to three times.
pub fn build_stage_dataset(vf: &VfModel, map: &FieldMap, m: usize, gamma: f64, seed: u64, first_id: u64) -> Result<Dataset> {
    let mut r = rng::stream(seed, "stage-dataset");
    let mut xis = perturbed_samples(vf, m, gamma, &mut r)?;
    let mut states: Vec<Result<Vec<f64>>> = xis.par_iter().map(|x| map.exact_state(x)).collect();
    for (i, st) in states.iter_mut().enumerate() {
        let mut tries = 0;
        while st.is_err() {
            if tries == 3 {
                return Err(Error::Solver(format!("sample {i} failed after 3 redraws")));
            }
            log::warn!("exact solve failed for sample {i}; redrawing");
            xis[i] = perturbed_samples(vf, 1, gamma, &mut r)?.remove(0);
            *st = map.exact_state(&xis[i]);
            tries += 1;
        }
    }
    let targets: Vec<f64> = states.into_iter().map(|s| s.expect("checked")).collect::<Vec<_>>().concat();
    let inputs = map.fields(&xis)?;
    let shape = inputs.shape().to_vec();
    Dataset::new(inputs, Array::new(shape, targets)?, (first_id..first_id + m as u64).collect())
}

/// Problem-specific side of the loop.
pub trait StageModel {
    fn dim(&self) -> usize;
    fn forward(&self) -> &dyn DiffForward;
    fn likelihood(&self) -> &Likelihood;
    /// Exact misfit at one point.
    fn exact_misfit(&self, xi: &[f64]) -> Result<f64>;
    /// Called with the VF model after a non-final stage.
    fn refine(&mut self, vf: &VfModel, stage: usize, cfg: &LoopConfig, seed: u64) -> Result<()>;
    fn fitting_error(&self, cfg: &LoopConfig, seed: u64) -> Result<Option<f64>>;
    fn inversion_error(&self, mu: &[f64]) -> Result<Option<f64>>;
}

/// PDE problem with an FNO surrogate inside the misfit.
pub struct SurrogateStage<'a> {
    pub problem: &'a Problem,
    pub surrogate: Surrogate,
    next_id: u64,
    /// Ids of the pairs used by the most recent fine-tuning.
    pub last_dataset_ids: Vec<u64>,
}

impl<'a> SurrogateStage<'a> {
    /// `first_id` is the first unused sample id (pre-training pairs use ids
    /// below it).
    pub fn new(problem: &'a Problem, surrogate: Surrogate, first_id: u64) -> Result<Self> {
        if surrogate.map.d() != problem.d() {
            return Err(Error::shape(format!("surrogate dim {} != problem dim {}", surrogate.map.d(), problem.d())));
        }
        Ok(Self { problem, surrogate, next_id: first_id, last_dataset_ids: Vec::new() })
    }
}

impl StageModel for SurrogateStage<'_> {
    fn dim(&self) -> usize {
        self.problem.d()
    }

    fn forward(&self) -> &dyn DiffForward {
        &self.surrogate
    }

    fn likelihood(&self) -> &Likelihood {
        &self.problem.likelihood
    }

    fn exact_misfit(&self, xi: &[f64]) -> Result<f64> {
        misfit(&self.problem.forward.forward(xi)?, &self.problem.likelihood)
    }

    fn refine(&mut self, vf: &VfModel, stage: usize, cfg: &LoopConfig, seed: u64) -> Result<()> {
        let data = build_stage_dataset(vf, &self.surrogate.map, cfg.m, cfg.gamma, stage_seed(seed, stage, "data"), self.next_id)?;
        self.next_id += data.len() as u64;
        self.last_dataset_ids = data.ids.clone();
        let mut r = rng::stream(stage_seed(seed, stage, "finetune"), "finetune");
        finetune(&mut self.surrogate.model, &data, &cfg.finetune, &mut r)?;
        Ok(())
    }

    fn fitting_error(&self, cfg: &LoopConfig, seed: u64) -> Result<Option<f64>> {
        let s = &self.surrogate;
        let e = surrogate_fitting_error(&|x| s.states(x), &s.map, &self.problem.reference_xi, cfg.fitting_points, seed)?;
        Ok(Some(e))
    }

    fn inversion_error(&self, mu: &[f64]) -> Result<Option<f64>> {
        Ok(Some(inversion_error(mu, &self.problem.reference_field, &self.problem.forward.basis)?))
    }
}

/// Linear-Gaussian problem evaluated exactly (no surrogate to refine).
pub struct LinearStage {
    pub forward: LinearForward,
    pub likelihood: Likelihood,
}

impl StageModel for LinearStage {
    fn dim(&self) -> usize {
        self.forward.dim()
    }

    fn forward(&self) -> &dyn DiffForward {
        &self.forward
    }

    fn likelihood(&self) -> &Likelihood {
        &self.likelihood
    }

    fn exact_misfit(&self, xi: &[f64]) -> Result<f64> {
        misfit(&self.forward.apply(xi), &self.likelihood)
    }

    fn refine(&mut self, _: &VfModel, _: usize, _: &LoopConfig, _: u64) -> Result<()> {
        Ok(())
    }

    fn fitting_error(&self, _: &LoopConfig, _: u64) -> Result<Option<f64>> {
        Ok(None)
    }

    fn inversion_error(&self, _: &[f64]) -> Result<Option<f64>> {
        Ok(None)
    }
}

fn stage_seed(seed: u64, stage: usize, what: &str) -> u64 {
    use rand::RngCore;
    rng::stream(seed, &format!("stage-{stage}-{what}")).next_u64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub epochs: usize,
    pub vf_loss: f64,
    /// Exact misfit at the prior mean reached at the end of the stage.
    pub phi_prior_exact: f64,
    pub e_i: Option<f64>,
    /// Fitting error of the surrogate used during the stage.
    pub e_s: Option<f64>,
    /// Excluded from CSV output so logs replay byte-exactly.
    pub wallclock_s: f64,
}

pub const STAGE_LOG_HEADER: &str = "stage,epoch,vf_loss,phi_prior_exact,e_I,e_S";

impl StageRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.17e}"));
        format!(
            "{},{},{:.17e},{:.17e},{},{}",
            self.stage,
            self.epochs,
            self.vf_loss,
            self.phi_prior_exact,
            opt(self.e_i),
            opt(self.e_s)
        )
    }
}

pub fn stage_log_csv(log: &[StageRecord]) -> String {
    let mut s = String::from(STAGE_LOG_HEADER);
    s.push('\n');
    for r in log {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub struct AdaptiveOutput {
    pub vf: VfModel,
    pub mu_post: Vec<f64>,
    pub mu_prior: Vec<f64>,
    pub log: Vec<StageRecord>,
    pub converged: bool,
}

/// Trains for one stage; returns the updated prior mean and the mean loss of
/// the last epoch.
fn train_stage(
    vf: &mut VfModel,
    model: &dyn StageModel,
    mu_anchor: &[f64],
    cfg: &LoopConfig,
    lr: f64,
    r: &mut Rng,
) -> Result<(Vec<f64>, f64)> {
    let mut adam = Adam::new(lr);
    let steps = (cfg.stage_samples / cfg.batch).max(1);
    let mut mu_prior = mu_anchor.to_vec();
    let mut last = 0.0;
    for _ in 0..cfg.n_e {
        let mu_post = estimate_posterior_mean(vf, cfg.m, r)?;
        mu_prior = update_prior_mean(&mu_post, mu_anchor, cfg.alpha)?;
        let target = PosteriorTarget { forward: model.forward(), likelihood: model.likelihood(), prior_mean: mu_prior.clone() };
        let mut total = 0.0;
        for _ in 0..steps {
            let loss = vf.train_step(&mut adam, &target, cfg.batch, r)?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!("VF loss became {loss}")));
            }
            total += loss;
        }
        last = total / steps as f64;
    }
    Ok((mu_prior, last))
}

/// Runs the adaptive loop from `vf` (already initialized) and `μ_prior = μ₀`.
pub fn run_adaptive_with(
    model: &mut dyn StageModel,
    mut vf: VfModel,
    mu0: &[f64],
    cfg: &LoopConfig,
    seed: u64,
) -> Result<AdaptiveOutput> {
    cfg.validate()?;
    if vf.d != model.dim() || mu0.len() != model.dim() {
        return Err(Error::shape("VF, prior mean and problem dimensions differ"));
    }
    let mut mu_prior = mu0.to_vec();
    let mut phi_prev = model.exact_misfit(&mu_prior)?;
    let mut log = Vec::new();
    let mut converged = false;
    for stage in 1..=cfg.k_max {
        let start = Instant::now();
        let e_s = model.fitting_error(cfg, stage_seed(seed, stage, "fitting"))?;
        let snapshot = vf.clone();
        let mut r = rng::stream(stage_seed(seed, stage, "vf"), "vf");
        let (mu_new, loss) = match train_stage(&mut vf, model, &mu_prior, cfg, cfg.vf_lr, &mut r) {
            Ok(v) => v,
            Err(Error::Numeric(msg)) => {
                log::warn!("stage {stage} diverged ({msg}); restarting with halved learning rate");
                vf = snapshot;
                let mut r = rng::stream(stage_seed(seed, stage, "vf-retry"), "vf");
                train_stage(&mut vf, model, &mu_prior, cfg, 0.5 * cfg.vf_lr, &mut r)
                    .map_err(|e| Error::numeric(format!("stage {stage} diverged twice: {e}")))?
            }
            Err(e) => return Err(e),
        };
        mu_prior = mu_new;
        let phi = model.exact_misfit(&mu_prior)?;
        let mut r = rng::stream(stage_seed(seed, stage, "mean"), "mean");
        let mu_post = estimate_posterior_mean(&vf, cfg.m, &mut r)?;
        let e_i = model.inversion_error(&mu_post)?;
        log.push(StageRecord {
            stage,
            epochs: cfg.n_e,
            vf_loss: loss,
            phi_prior_exact: phi,
            e_i,
            e_s,
            wallclock_s: start.elapsed().as_secs_f64(),
        });
        log::info!("stage {stage}: loss {loss:.4} phi {phi:.4} e_I {e_i:?} e_S {e_s:?}");
        if stopping_check(phi_prev, phi, cfg.epsilon) {
            converged = true;
            break;
        }
        phi_prev = phi;
        if stage < cfg.k_max {
            model.refine(&vf, stage, cfg, seed)?;
        }
    }
    let mut r = rng::stream(seed, "final-mean");
    let mu_post = estimate_posterior_mean(&vf, cfg.m, &mut r)?;
    Ok(AdaptiveOutput { vf, mu_post, mu_prior, log, converged })
}

/// Fresh VF (latent `min(cfg.latent, d − 1)`) and `μ₀ = 0`.
pub fn run_adaptive(model: &mut dyn StageModel, cfg: &LoopConfig, seed: u64) -> Result<AdaptiveOutput> {
    let d = model.dim();
    let k = cfg.latent.min(d.saturating_sub(1)).max(1);
    let vf = VfModel::new(&VfConfig::new(d, k), &mut rng::stream(seed, "vf-init"))?;
    run_adaptive_with(model, vf, &vec![0.0; d], cfg, seed)
}
