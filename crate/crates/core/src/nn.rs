//! Dense layers built on the tape.

use rand::Rng as _;

use crate::difftensor::{Array, Bound, ParamId, ParamSet, Tape, Var};
use crate::error::Result;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Gelu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

/// Affine map `x W + b` applied row-wise to `[n, fan_in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn new(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        let b: Vec<f64> = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            w: params.add(format!("{name}.w"), Array::new(vec![fan_in, fan_out], w).expect("shape")),
            b: params.add(format!("{name}.b"), Array::from_vec(b)),
            fan_in,
            fan_out,
        }
    }

    pub fn zeros(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: params.add(format!("{name}.w"), Array::zeros(&[fan_in, fan_out])),
            b: params.add(format!("{name}.b"), Array::zeros(&[fan_out])),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        let shape = tape.shape(y).to_vec();
        let b = tape.broadcast_to(p[self.b], &shape)?;
        tape.add(y, b)
    }
}

/// Multi-layer perceptron; the activation is applied between layers only.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    /// `sizes = [in, h1, ..., out]`. With `zero_last`, the output layer starts
    /// at zero so the network initially outputs exactly zero.
    pub fn new(params: &mut ParamSet, name: &str, sizes: &[usize], act: Activation, zero_last: bool, rng: &mut Rng) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let lname = format!("{name}.{i}");
                if zero_last && i == n - 1 {
                    Linear::zeros(params, &lname, sizes[i], sizes[i + 1])
                } else {
                    Linear::new(params, &lname, sizes[i], sizes[i + 1], rng)
                }
            })
            .collect();
        Self { layers, act }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, p, x)?;
            if i < last {
                x = self.act.apply(tape, x)?;
            }
        }
        Ok(x)
    }
}
