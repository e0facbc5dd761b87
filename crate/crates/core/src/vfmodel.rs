//! Variational Flow: flow prior `p(z)`, conditional-flow encoder `q(z|x)`
//! and diagonal Gaussian decoder `p(x|z)`, plus a VAE baseline.

use std::f64::consts::PI;

use crate::difftensor::{Adam, Array, Bound, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::flows::{diag_normal_logpdf, std_normal_logpdf, FlowStack};
use crate::nn::{Activation, Mlp};
use crate::rng::{self, Rng};

pub const SIGMA_FLOOR: f64 = 1e-4;

/// Unnormalized log target `log p̂(x)` evaluated on a tape, one value per row.
pub trait LogTarget {
    fn dim(&self) -> usize;
    fn log_prob(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct VfConfig {
    pub d: usize,
    pub k: usize,
    pub prior_layers: usize,
    pub encoder_layers: usize,
    pub decoder_hidden: Vec<usize>,
}

impl VfConfig {
    pub fn new(d: usize, k: usize) -> Self {
        Self { d, k, prior_layers: 6, encoder_layers: 2, decoder_hidden: vec![64; 5] }
    }
}

/// `x ~ N(μ(z), diag σ(z)²)` with `σ = softplus(·) + 1e-4`.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub net: Mlp,
    pub d: usize,
}

impl Decoder {
    pub fn new(params: &mut ParamSet, name: &str, k: usize, d: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let mut sizes = vec![k];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * d);
        Self { net: Mlp::new(params, name, &sizes, Activation::Tanh, false, rng), d }
    }

    /// `(μ, σ)`, each `[n, d]`.
    pub fn decode(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<(Var, Var)> {
        let out = self.net.forward(tape, p, z)?;
        let mu = tape.slice_last(out, 0, self.d)?;
        let raw = tape.slice_last(out, self.d, self.d)?;
        let sp = tape.softplus(raw)?;
        let sigma = tape.add_scalar(sp, SIGMA_FLOOR)?;
        Ok((mu, sigma))
    }

    /// `log N(x; μ(z), diag σ(z)²)` per row.
    pub fn log_density(&self, tape: &mut Tape, p: &Bound, x: Var, z: Var) -> Result<Var> {
        let (mu, sigma) = self.decode(tape, p, z)?;
        let ls = tape.log(sigma)?;
        diag_normal_logpdf(tape, x, mu, ls)
    }

    /// Reparameterized `x = μ + σ ⊙ ε`.
    pub fn sample(&self, tape: &mut Tape, p: &Bound, z: Var, rng: &mut Rng) -> Result<Var> {
        let (mu, sigma) = self.decode(tape, p, z)?;
        let n = tape.shape(z)[0];
        let eps = tape.constant(Array::new(vec![n, self.d], rng::normal_vec(rng, n * self.d))?);
        let scaled = tape.mul(sigma, eps)?;
        tape.add(mu, scaled)
    }
}

/// Joint draw from the model with its log-density terms, all `[n]` except
/// `z` (`[n, k]`) and `x` (`[n, d]`).
pub struct JointDraw {
    pub z: Var,
    pub x: Var,
    pub log_pz: Var,
    pub log_px_z: Var,
}

#[derive(Clone, Debug)]
pub struct VfModel {
    pub params: ParamSet,
    pub prior: FlowStack,
    pub encoder: FlowStack,
    pub decoder: Decoder,
    pub d: usize,
    pub k: usize,
}

impl VfModel {
    pub fn new(cfg: &VfConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.k == 0 || cfg.k > cfg.d {
            return Err(Error::config(format!("latent dim {} must lie in 1..={}", cfg.k, cfg.d)));
        }
        let mut params = ParamSet::new();
        let prior = FlowStack::prior(&mut params, "prior", cfg.k, cfg.prior_layers, rng);
        let encoder = FlowStack::conditional(&mut params, "encoder", cfg.k, cfg.d, cfg.encoder_layers, rng);
        let decoder = Decoder::new(&mut params, "decoder", cfg.k, cfg.d, &cfg.decoder_hidden, rng);
        Ok(Self { params, prior, encoder, decoder, d: cfg.d, k: cfg.k })
    }

    /// `z = f_pr⁻¹(v)`, `x = μ(z) + σ(z) ε`.
    pub fn draw(&self, tape: &mut Tape, p: &Bound, n: usize, rng: &mut Rng) -> Result<JointDraw> {
        let (z, log_pz) = self.prior.sample(tape, p, n, None, rng)?;
        let x = self.decoder.sample(tape, p, z, rng)?;
        let log_px_z = self.decoder.log_density(tape, p, x, z)?;
        Ok(JointDraw { z, x, log_pz, log_px_z })
    }

    /// Minimized objective
    /// `mean[log p(x|z) + log p(z) − log q(z|x) − log p̂(x)]`, i.e. the KL of
    /// the VF joint against `q(z|x) p̂(x)` up to `log` of the target's mass.
    pub fn unnorm_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        target: &dyn LogTarget,
        batch: usize,
        rng: &mut Rng,
    ) -> Result<Var> {
        if target.dim() != self.d {
            return Err(Error::shape(format!("target dim {} != model dim {}", target.dim(), self.d)));
        }
        let draw = self.draw(tape, p, batch, rng)?;
        let log_q = self.encoder.log_density(tape, p, draw.z, Some(draw.x))?;
        let log_t = match target.log_prob(tape, draw.x) {
            Ok(v) => v,
            Err(Error::Numeric(msg)) => return Err(locate_bad_target(tape.value(draw.x), target, msg)),
            Err(e) => return Err(e),
        };
        let a = tape.add(draw.log_px_z, draw.log_pz)?;
        let b = tape.sub(a, log_q)?;
        let c = tape.sub(b, log_t)?;
        let s = tape.sum(c)?;
        tape.scale(s, 1.0 / batch as f64)
    }

    /// Mean ELBO of a data batch `[n, d]` with one encoder draw per datum.
    pub fn elbo(&self, tape: &mut Tape, p: &Bound, x: Var, rng: &mut Rng) -> Result<Var> {
        self.elbo_weighted(tape, p, x, 1.0, rng)
    }

    /// `E[log p(x|z)] + β E[log p(z) − log q(z|x)]`; `β = 1` is the ELBO.
    pub fn elbo_weighted(&self, tape: &mut Tape, p: &Bound, x: Var, beta: f64, rng: &mut Rng) -> Result<Var> {
        let n = tape.shape(x)[0];
        let (z, log_q) = self.encoder.sample(tape, p, n, Some(x), rng)?;
        let log_pz = self.prior.log_density(tape, p, z, None)?;
        let log_px = self.decoder.log_density(tape, p, x, z)?;
        let a = tape.sub(log_pz, log_q)?;
        let a = tape.scale(a, beta)?;
        let b = tape.add(log_px, a)?;
        let s = tape.sum(b)?;
        tape.scale(s, 1.0 / n as f64)
    }

    /// Posterior samples `ξ`, `[n, d]`.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Array> {
        let mut out = Vec::with_capacity(n * self.d);
        let mut left = n;
        while left > 0 {
            let m = left.min(4096);
            let mut tape = Tape::new();
            let p = self.params.bind_frozen(&mut tape);
            let (z, _) = self.prior.sample(&mut tape, &p, m, None, rng)?;
            let x = self.decoder.sample(&mut tape, &p, z, rng)?;
            out.extend_from_slice(tape.value(x).data());
            left -= m;
        }
        Array::new(vec![n, self.d], out)
    }

    /// Sample mean of `n` draws.
    pub fn posterior_mean(&self, n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        let s = self.sample(n, rng)?;
        Ok(column_means(&s))
    }

    /// One Adam step on the unnormalized-target loss; returns the loss.
    pub fn train_step(&mut self, adam: &mut Adam, target: &dyn LogTarget, batch: usize, rng: &mut Rng) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let loss = self.unnorm_loss(&mut tape, &p, target, batch, rng)?;
        let g = tape.backward(loss)?;
        self.params.zero_grad();
        self.params.accumulate(&g, &p);
        adam.step(&mut self.params)?;
        Ok(tape.value(loss).item())
    }

    /// One Adam step maximizing the `β`-weighted ELBO of `x` (`[n, d]`);
    /// returns the objective value.
    pub fn elbo_step(&mut self, adam: &mut Adam, x: &Array, beta: f64, rng: &mut Rng) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let elbo = self.elbo_weighted(&mut tape, &p, xv, beta, rng)?;
        let loss = tape.neg(elbo)?;
        let g = tape.backward(loss)?;
        self.params.zero_grad();
        self.params.accumulate(&g, &p);
        adam.step(&mut self.params)?;
        Ok(tape.value(elbo).item())
    }
}

/// Re-evaluates rows one at a time to name the parameter vector at which the
/// target is not finite.
fn locate_bad_target(x: &Array, target: &dyn LogTarget, msg: String) -> Error {
    let d = x.shape()[1];
    for row in x.data().chunks(d) {
        let mut t = Tape::new();
        let xv = t.constant(Array::new(vec![1, d], row.to_vec()).expect("row"));
        if target.log_prob(&mut t, xv).is_err() {
            return Error::numeric(format!("target not finite at ξ = {row:?} ({msg})"));
        }
    }
    Error::numeric(format!("target not finite ({msg})"))
}

pub fn column_means(a: &Array) -> Vec<f64> {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let mut m = vec![0.0; d];
    for row in a.data().chunks(d) {
        m.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    m
}

/// `½ Σ (μ² + σ² − 1 − log σ²)` per row, with `σ = exp(log_sigma)`.
pub fn gaussian_kl(tape: &mut Tape, mu: Var, log_sigma: Var) -> Result<Var> {
    let mu2 = tape.square(mu)?;
    let two_ls = tape.scale(log_sigma, 2.0)?;
    let var = tape.exp(two_ls)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, two_ls)?;
    let c = tape.add_scalar(b, -1.0)?;
    let s = tape.sum_axis(c, 1)?;
    tape.scale(s, 0.5)
}

/// Gaussian-encoder VAE with a fixed standard normal prior.
#[derive(Clone, Debug)]
pub struct VaeBaseline {
    pub params: ParamSet,
    pub encoder: Mlp,
    pub decoder: Decoder,
    pub d: usize,
    pub k: usize,
}

impl VaeBaseline {
    pub fn new(d: usize, k: usize, encoder_hidden: &[usize], decoder_hidden: &[usize], rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        let mut sizes = vec![d];
        sizes.extend_from_slice(encoder_hidden);
        sizes.push(2 * k);
        let encoder = Mlp::new(&mut params, "vae.encoder", &sizes, Activation::Tanh, true, rng);
        let decoder = Decoder::new(&mut params, "vae.decoder", k, d, decoder_hidden, rng);
        Self { params, encoder, decoder, d, k }
    }

    /// VAE with the same decoder architecture as `cfg` and a two-hidden-layer
    /// encoder whose width brings the parameter count closest to the VF's.
    pub fn matched(cfg: &VfConfig, vf_params: usize, rng: &mut Rng) -> Self {
        let (d, k) = (cfg.d, cfg.k);
        let mut dec_sizes = vec![k];
        dec_sizes.extend_from_slice(&cfg.decoder_hidden);
        dec_sizes.push(2 * d);
        let dec: usize = dec_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let enc = |w: usize| (d + 1) * w + (w + 1) * w + (w + 1) * 2 * k;
        let width = (1..=4096).min_by_key(|&w| (dec + enc(w)).abs_diff(vf_params)).expect("non-empty range");
        Self::new(d, k, &[width, width], &cfg.decoder_hidden, rng)
    }

    /// Encoder mean and log-scale, `[n, k]` each.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let out = self.encoder.forward(tape, p, x)?;
        let mu = tape.slice_last(out, 0, self.k)?;
        let ls = tape.slice_last(out, self.k, self.k)?;
        Ok((mu, ls))
    }

    /// Mean ELBO: one-sample reconstruction term minus the closed-form KL.
    pub fn elbo(&self, tape: &mut Tape, p: &Bound, x: Var, rng: &mut Rng) -> Result<Var> {
        self.elbo_weighted(tape, p, x, 1.0, rng)
    }

    /// Reconstruction term minus `β` times the KL.
    pub fn elbo_weighted(&self, tape: &mut Tape, p: &Bound, x: Var, beta: f64, rng: &mut Rng) -> Result<Var> {
        let n = tape.shape(x)[0];
        let (mu, ls) = self.encode(tape, p, x)?;
        let eps = tape.constant(Array::new(vec![n, self.k], rng::normal_vec(rng, n * self.k))?);
        let sigma = tape.exp(ls)?;
        let noise = tape.mul(sigma, eps)?;
        let z = tape.add(mu, noise)?;
        let rec = self.decoder.log_density(tape, p, x, z)?;
        let kl = gaussian_kl(tape, mu, ls)?;
        let kl = tape.scale(kl, beta)?;
        let e = tape.sub(rec, kl)?;
        let s = tape.sum(e)?;
        tape.scale(s, 1.0 / n as f64)
    }

    pub fn elbo_step(&mut self, adam: &mut Adam, x: &Array, beta: f64, rng: &mut Rng) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let elbo = self.elbo_weighted(&mut tape, &p, xv, beta, rng)?;
        let loss = tape.neg(elbo)?;
        let g = tape.backward(loss)?;
        self.params.zero_grad();
        self.params.accumulate(&g, &p);
        adam.step(&mut self.params)?;
        Ok(tape.value(elbo).item())
    }

    /// Unnormalized-target loss with the standard normal prior, the VAE
    /// analogue of [`VfModel::unnorm_loss`].
    pub fn unnorm_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        target: &dyn LogTarget,
        batch: usize,
        rng: &mut Rng,
    ) -> Result<Var> {
        let eps = tape.constant(Array::new(vec![batch, self.k], rng::normal_vec(rng, batch * self.k))?);
        let log_pz = std_normal_logpdf(tape, eps)?;
        let x = self.decoder.sample(tape, p, eps, rng)?;
        let log_px = self.decoder.log_density(tape, p, x, eps)?;
        let (mu, ls) = self.encode(tape, p, x)?;
        let log_q = diag_normal_logpdf(tape, eps, mu, ls)?;
        let log_t = target.log_prob(tape, x)?;
        let a = tape.add(log_px, log_pz)?;
        let b = tape.sub(a, log_q)?;
        let c = tape.sub(b, log_t)?;
        let s = tape.sum(c)?;
        tape.scale(s, 1.0 / batch as f64)
    }

    pub fn train_step(&mut self, adam: &mut Adam, target: &dyn LogTarget, batch: usize, rng: &mut Rng) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let loss = self.unnorm_loss(&mut tape, &p, target, batch, rng)?;
        let g = tape.backward(loss)?;
        self.params.zero_grad();
        self.params.accumulate(&g, &p);
        adam.step(&mut self.params)?;
        Ok(tape.value(loss).item())
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Array> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let z = tape.constant(Array::new(vec![n, self.k], rng::normal_vec(rng, n * self.k))?);
        let x = self.decoder.sample(&mut tape, &p, z, rng)?;
        Ok(tape.value(x).clone())
    }
}

/// Gaussian log-density up to its normalizing log-determinant, given the
/// mean and a dense precision matrix.
#[derive(Clone, Debug)]
pub struct GaussianTarget {
    pub mean: Vec<f64>,
    /// `[d, d]` precision matrix.
    pub precision: Array,
}

impl LogTarget for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_prob(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        let d = self.mean.len();
        let m = tape.constant(Array::new(vec![1, d], self.mean.clone())?);
        let m = tape.broadcast_to(m, &[n, d])?;
        let diff = tape.sub(x, m)?;
        let prec = tape.constant(self.precision.clone());
        let pd = tape.matmul(diff, prec)?;
        let q = tape.mul(pd, diff)?;
        let q = tape.sum_axis(q, 1)?;
        let q = tape.scale(q, -0.5)?;
        tape.add_scalar(q, -0.5 * d as f64 * (2.0 * PI).ln())
    }
}
