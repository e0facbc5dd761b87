//! Affine coupling flows, unconditional and conditional.
//!
//! A stack maps data-side `z` to base-side `v` with `forward`; `inverse`
//! goes the other way. Both directions return the forward log-determinant
//! `Σ s`, so `log p(z) = log p_base(v) + Σ s` regardless of direction.

use std::f64::consts::PI;

use crate::difftensor::{Array, Bound, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::rng::{self, Rng};

pub const SUBNET_WIDTH: usize = 32;
pub const SCALE_CLAMP: f64 = 5.0;
/// Number of coordinate groups rotated between layers.
pub const SQUEEZE: usize = 4;

/// Conditioning half `A` of layer `layer` for a `k`-dimensional latent.
///
/// Coordinates are grouped by `j mod s` with `s = min(4, k)`; layer `l`
/// conditions on the groups `g` with `(g + l) mod s < s/2`, so the roles
/// rotate and every coordinate is transformed within `s` layers.
pub fn mask(k: usize, layer: usize) -> (Vec<usize>, Vec<usize>) {
    let s = SQUEEZE.min(k).max(1);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for j in 0..k {
        if ((j % s) + layer) % s < s / 2 {
            a.push(j);
        } else {
            b.push(j);
        }
    }
    (a, b)
}

/// Rowwise `log N(v; 0, I)` of `[n, k]`, returned as `[n]`.
pub fn std_normal_logpdf(tape: &mut Tape, v: Var) -> Result<Var> {
    let k = tape.shape(v)[1] as f64;
    let sq = tape.square(v)?;
    let s = tape.sum_axis(sq, 1)?;
    let s = tape.scale(s, -0.5)?;
    tape.add_scalar(s, -0.5 * k * (2.0 * PI).ln())
}

/// Rowwise `log N(v; μ, diag σ²)` with `σ = exp(log_sigma)`.
pub fn diag_normal_logpdf(tape: &mut Tape, v: Var, mu: Var, log_sigma: Var) -> Result<Var> {
    let k = tape.shape(v)[1] as f64;
    let diff = tape.sub(v, mu)?;
    let neg = tape.neg(log_sigma)?;
    let inv = tape.exp(neg)?;
    let u = tape.mul(diff, inv)?;
    let sq = tape.square(u)?;
    let quad = tape.sum_axis(sq, 1)?;
    let quad = tape.scale(quad, -0.5)?;
    let ls = tape.sum_axis(log_sigma, 1)?;
    let out = tape.sub(quad, ls)?;
    tape.add_scalar(out, -0.5 * k * (2.0 * PI).ln())
}

/// `c · tanh(x / c)`.
fn soft_clamp(tape: &mut Tape, x: Var, c: f64) -> Result<Var> {
    let y = tape.scale(x, 1.0 / c)?;
    let y = tape.tanh(y)?;
    tape.scale(y, c)
}

#[derive(Clone, Debug)]
pub struct CouplingLayer {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub s_net: Mlp,
    pub t_net: Mlp,
    pub clamp: f64,
    pub k: usize,
    pub cond_dim: usize,
}

impl CouplingLayer {
    pub fn new(params: &mut ParamSet, name: &str, k: usize, cond_dim: usize, layer: usize, rng: &mut Rng) -> Self {
        let (a, b) = mask(k, layer);
        let sizes = [a.len() + cond_dim, SUBNET_WIDTH, SUBNET_WIDTH, b.len()];
        let s_net = Mlp::new(params, &format!("{name}.s"), &sizes, Activation::Tanh, true, rng);
        let t_net = Mlp::new(params, &format!("{name}.t"), &sizes, Activation::Tanh, true, rng);
        Self { a, b, s_net, t_net, clamp: SCALE_CLAMP, k, cond_dim }
    }

    /// Clamped scale and shift computed from the conditioning half.
    fn scale_shift(&self, tape: &mut Tape, p: &Bound, x: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        let xa = tape.gather_last(x, &self.a)?;
        let input = match cond {
            Some(c) => tape.concat_last(&[xa, c])?,
            None => xa,
        };
        let s = self.s_net.forward(tape, p, input)?;
        let s = soft_clamp(tape, s, self.clamp)?;
        let t = self.t_net.forward(tape, p, input)?;
        Ok((s, t))
    }

    fn check(&self, tape: &Tape, x: Var, cond: Option<Var>) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.k {
            return Err(Error::shape(format!("coupling expects [n, {}], got {:?}", self.k, s)));
        }
        let cw = cond.map_or(0, |c| tape.shape(c)[1]);
        if cw != self.cond_dim {
            return Err(Error::shape(format!("coupling expects {} conditioning columns, got {cw}", self.cond_dim)));
        }
        Ok(())
    }

    /// `v^A = z^A`, `v^B = z^B ⊙ exp(s) + t`; returns `(v, Σ s)`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        self.check(tape, z, cond)?;
        let (s, t) = self.scale_shift(tape, p, z, cond)?;
        let zb = tape.gather_last(z, &self.b)?;
        let es = tape.exp(s)?;
        let vb = tape.mul(zb, es)?;
        let vb = tape.add(vb, t)?;
        let out = self.assemble(tape, z, vb)?;
        let logdet = tape.sum_axis(s, 1)?;
        Ok((out, logdet))
    }

    /// `z^B = (v^B − t) ⊙ exp(−s)`; returns `(z, Σ s)`.
    pub fn inverse(&self, tape: &mut Tape, p: &Bound, v: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        self.check(tape, v, cond)?;
        let (s, t) = self.scale_shift(tape, p, v, cond)?;
        let vb = tape.gather_last(v, &self.b)?;
        let diff = tape.sub(vb, t)?;
        let ns = tape.neg(s)?;
        let ens = tape.exp(ns)?;
        let zb = tape.mul(diff, ens)?;
        let out = self.assemble(tape, v, zb)?;
        let logdet = tape.sum_axis(s, 1)?;
        Ok((out, logdet))
    }

    /// Puts the untouched `A` columns of `x` and the new `B` columns together.
    fn assemble(&self, tape: &mut Tape, x: Var, new_b: Var) -> Result<Var> {
        let part_b = tape.scatter_last(new_b, &self.b, self.k)?;
        if self.a.is_empty() {
            return Ok(part_b);
        }
        let xa = tape.gather_last(x, &self.a)?;
        let part_a = tape.scatter_last(xa, &self.a, self.k)?;
        tape.add(part_a, part_b)
    }
}

/// Base distribution of a stack.
#[derive(Clone, Debug)]
pub enum Base {
    StandardNormal,
    /// `N(μ(c), diag σ(c)²)` with `[μ, log σ] = net(c)`.
    Conditional(Mlp),
}

#[derive(Clone, Debug)]
pub struct FlowStack {
    pub layers: Vec<CouplingLayer>,
    pub base: Base,
    pub k: usize,
    pub cond_dim: usize,
}

impl FlowStack {
    /// Unconditional stack with a standard normal base.
    pub fn prior(params: &mut ParamSet, name: &str, k: usize, n_layers: usize, rng: &mut Rng) -> Self {
        let layers = (0..n_layers).map(|l| CouplingLayer::new(params, &format!("{name}.{l}"), k, 0, l, rng)).collect();
        Self { layers, base: Base::StandardNormal, k, cond_dim: 0 }
    }

    /// Conditional stack whose base mean and scale are networks of the
    /// conditioning vector. At initialization the base is `N(0, I)` and every
    /// layer is the identity.
    pub fn conditional(
        params: &mut ParamSet,
        name: &str,
        k: usize,
        cond_dim: usize,
        n_layers: usize,
        rng: &mut Rng,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|l| CouplingLayer::new(params, &format!("{name}.{l}"), k, cond_dim, l, rng))
            .collect();
        let sizes = [cond_dim, SUBNET_WIDTH, SUBNET_WIDTH, 2 * k];
        let net = Mlp::new(params, &format!("{name}.base"), &sizes, Activation::Tanh, true, rng);
        Self { layers, base: Base::Conditional(net), k, cond_dim }
    }

    pub fn is_conditional(&self) -> bool {
        matches!(self.base, Base::Conditional(_))
    }

    fn cond_for(&self, cond: Option<Var>) -> Result<Option<Var>> {
        match (self.is_conditional(), cond) {
            (true, None) => Err(Error::shape("conditional flow needs a conditioning input")),
            (false, Some(_)) => Err(Error::shape("unconditional flow given a conditioning input")),
            (_, c) => Ok(c),
        }
    }

    /// `z -> v` through all layers; returns `(v, Σ logdet)` with shape `[n]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        let cond = self.cond_for(cond)?;
        let n = tape.shape(z)[0];
        let mut total = tape.constant(Array::zeros(&[n]));
        let mut x = z;
        for layer in &self.layers {
            let (y, ld) = layer.forward(tape, p, x, cond)?;
            x = y;
            total = tape.add(total, ld)?;
        }
        Ok((x, total))
    }

    /// `v -> z` through the layers in reverse; returns `(z, Σ logdet)` of the
    /// forward map at `z`.
    pub fn inverse(&self, tape: &mut Tape, p: &Bound, v: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        let cond = self.cond_for(cond)?;
        let n = tape.shape(v)[0];
        let mut total = tape.constant(Array::zeros(&[n]));
        let mut x = v;
        for layer in self.layers.iter().rev() {
            let (y, ld) = layer.inverse(tape, p, x, cond)?;
            x = y;
            total = tape.add(total, ld)?;
        }
        Ok((x, total))
    }

    /// Base mean and log-scale for a conditional stack, `[n, k]` each.
    pub fn base_params(&self, tape: &mut Tape, p: &Bound, cond: Var) -> Result<Option<(Var, Var)>> {
        match &self.base {
            Base::StandardNormal => Ok(None),
            Base::Conditional(net) => {
                let out = net.forward(tape, p, cond)?;
                let mu = tape.slice_last(out, 0, self.k)?;
                let ls = tape.slice_last(out, self.k, self.k)?;
                let ls = soft_clamp(tape, ls, SCALE_CLAMP)?;
                Ok(Some((mu, ls)))
            }
        }
    }

    fn base_logpdf(&self, tape: &mut Tape, p: &Bound, v: Var, cond: Option<Var>) -> Result<Var> {
        match cond {
            Some(c) if self.is_conditional() => {
                let (mu, ls) = self.base_params(tape, p, c)?.expect("conditional base");
                diag_normal_logpdf(tape, v, mu, ls)
            }
            _ => std_normal_logpdf(tape, v),
        }
    }

    /// `log p(z)` per row, `[n]`.
    pub fn log_density(&self, tape: &mut Tape, p: &Bound, z: Var, cond: Option<Var>) -> Result<Var> {
        let (v, ld) = self.forward(tape, p, z, cond)?;
        let base = self.base_logpdf(tape, p, v, cond)?;
        tape.add(base, ld)
    }

    /// Reparameterized draw of `n` samples: base noise enters as a constant,
    /// so gradients reach the parameters. Returns `(z, log p(z))`.
    pub fn sample(&self, tape: &mut Tape, p: &Bound, n: usize, cond: Option<Var>, rng: &mut Rng) -> Result<(Var, Var)> {
        let cond = self.cond_for(cond)?;
        if let Some(c) = cond {
            if tape.shape(c)[0] != n {
                return Err(Error::shape("conditioning rows differ from sample count"));
            }
        }
        let eps = tape.constant(Array::new(vec![n, self.k], rng::normal_vec(rng, n * self.k))?);
        let v = match cond {
            Some(c) => {
                let (mu, ls) = self.base_params(tape, p, c)?.expect("conditional base");
                let sigma = tape.exp(ls)?;
                let scaled = tape.mul(eps, sigma)?;
                tape.add(mu, scaled)?
            }
            None => eps,
        };
        let base = self.base_logpdf(tape, p, v, cond)?;
        let (z, ld) = self.inverse(tape, p, v, cond)?;
        let logp = tape.add(base, ld)?;
        Ok((z, logp))
    }
}
