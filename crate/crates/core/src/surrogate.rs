//! Fourier neural operator surrogate `m ↦ u` with prior pre-training and
//! fine-tuning on posterior-guided data.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::difftensor::checkpoint::{read_params, write_params};
use crate::difftensor::{Adam, Array, Bound, ParamId, ParamSet, SpectralPlan, Tape, Var};
use crate::error::{Error, Result};
use crate::forward::{ObservationOp, PdeForward, PdeKind};
use crate::nn::Linear;
use crate::randfield::{build_basis, read_field_record, write_field, Geometry, KlBasis};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FnoConfig {
    pub geometry: Geometry,
    /// Points per axis.
    pub grid: usize,
    pub width: usize,
    pub modes: usize,
    pub layers: usize,
    pub proj_hidden: usize,
    /// Append coordinate channels to the input.
    pub coords: bool,
}

impl FnoConfig {
    pub fn darcy1d(grid: usize) -> Self {
        Self { geometry: Geometry::IntervalNeumann1d, grid, width: 64, modes: 16, layers: 4, proj_hidden: 128, coords: true }
    }

    pub fn darcy2d(grid: usize) -> Self {
        Self { geometry: Geometry::SquareNeumann2d, grid, width: 32, modes: 12, layers: 4, proj_hidden: 128, coords: true }
    }

    pub fn ns2d(grid: usize) -> Self {
        Self { geometry: Geometry::SquarePeriodic2d, grid, width: 32, modes: 12, layers: 4, proj_hidden: 128, coords: true }
    }

    pub fn for_kind(kind: PdeKind, grid: usize) -> Self {
        match kind {
            PdeKind::Darcy1d => Self::darcy1d(grid),
            PdeKind::Darcy2d => Self::darcy2d(grid),
            PdeKind::Ns2d => Self::ns2d(grid),
        }
    }

    pub fn grid_shape(&self) -> Vec<usize> {
        if self.geometry.is_2d() {
            vec![self.grid, self.grid]
        } else {
            vec![self.grid]
        }
    }

    pub fn grid_len(&self) -> usize {
        self.grid_shape().iter().product()
    }
}

#[derive(Clone, Debug)]
pub struct FnoModel {
    pub cfg: FnoConfig,
    pub params: ParamSet,
    pub lift: Linear,
    /// Complex mixing weights `[2, K, W, W]` (real plane, then imaginary).
    pub spectral: Vec<ParamId>,
    pub bypass: Vec<Linear>,
    pub proj1: Linear,
    pub proj2: Linear,
    plan: Arc<SpectralPlan>,
    coords: Array,
}

impl FnoModel {
    pub fn new(cfg: &FnoConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.layers == 0 || cfg.width == 0 {
            return Err(Error::config("FNO needs at least one layer and a positive width"));
        }
        let plan = Arc::new(if cfg.geometry.is_2d() {
            SpectralPlan::new_2d(cfg.grid, cfg.grid, cfg.modes)?
        } else {
            SpectralPlan::new_1d(cfg.grid, cfg.modes)?
        });
        let dim = cfg.grid_shape().len();
        let n_coords = if cfg.coords { dim } else { 0 };
        let mut params = ParamSet::new();
        let w = cfg.width;
        let lift = Linear::new(&mut params, "fno.lift", 1 + n_coords, w, rng);
        let k = plan.n_modes();
        let scale = 1.0 / (w * w) as f64;
        let mut spectral = Vec::with_capacity(cfg.layers);
        let mut bypass = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let data = (0..2 * k * w * w).map(|_| rng.gen_range(-scale..scale)).collect();
            spectral.push(params.add(format!("fno.spectral.{l}"), Array::new(vec![2, k, w, w], data)?));
            bypass.push(Linear::new(&mut params, &format!("fno.bypass.{l}"), w, w, rng));
        }
        let proj1 = Linear::new(&mut params, "fno.proj1", w, cfg.proj_hidden, rng);
        let proj2 = Linear::new(&mut params, "fno.proj2", cfg.proj_hidden, 1, rng);
        let p = cfg.grid_len();
        let coords = if cfg.coords {
            let n = cfg.grid;
            let mut c = Vec::with_capacity(p * dim);
            for i in 0..p {
                if dim == 2 {
                    c.push(cfg.geometry.coord(i / n, n));
                    c.push(cfg.geometry.coord(i % n, n));
                } else {
                    c.push(cfg.geometry.coord(i, n));
                }
            }
            Array::new(vec![p, dim], c)?
        } else {
            Array::zeros(&[p, 0])
        };
        Ok(Self { cfg: cfg.clone(), params, lift, spectral, bypass, proj1, proj2, plan, coords })
    }

    pub fn grid_len(&self) -> usize {
        self.cfg.grid_len()
    }

    fn spatial_shape(&self, batch: usize) -> Vec<usize> {
        let mut s = vec![batch];
        s.extend(self.cfg.grid_shape());
        s.push(self.cfg.width);
        s
    }

    /// Spectral path of layer `l` alone, `[B·P, W] -> [B·P, W]`.
    pub fn spectral_conv(&self, tape: &mut Tape, p: &Bound, l: usize, h: Var, batch: usize) -> Result<Var> {
        let hs = tape.reshape(h, &self.spatial_shape(batch))?;
        let f = tape.rfft(hs, &self.plan)?;
        let g = tape.cmix(f, p[self.spectral[l]])?;
        let s = tape.irfft(g, &self.plan)?;
        tape.reshape(s, &[batch * self.grid_len(), self.cfg.width])
    }

    /// Predicted state for fields `m: [B, P]`; returns `[B, P]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, m: Var) -> Result<Var> {
        let shape = tape.shape(m).to_vec();
        let np = self.grid_len();
        if shape.len() != 2 || shape[1] != np {
            return Err(Error::shape(format!("FNO expects [batch, {np}] fields, got {shape:?}")));
        }
        let b = shape[0];
        let mut x = tape.reshape(m, &[b * np, 1])?;
        if self.cfg.coords {
            let dim = self.coords.shape()[1];
            let c = tape.constant(self.coords.clone());
            let c = tape.broadcast_to(c, &[b, np, dim])?;
            let c = tape.reshape(c, &[b * np, dim])?;
            x = tape.concat_last(&[x, c])?;
        }
        let mut h = self.lift.forward(tape, p, x)?;
        for l in 0..self.cfg.layers {
            let s = self.spectral_conv(tape, p, l, h, b)?;
            let by = self.bypass[l].forward(tape, p, h)?;
            h = tape.add(s, by)?;
            if l + 1 < self.cfg.layers {
                h = tape.gelu(h)?;
            }
        }
        let h = self.proj1.forward(tape, p, h)?;
        let h = tape.gelu(h)?;
        let out = self.proj2.forward(tape, p, h)?;
        tape.reshape(out, &[b, np])
    }

    /// Inference on `[B, P]` fields without gradients.
    pub fn predict(&self, fields: &Array) -> Result<Array> {
        let np = self.grid_len();
        if fields.ndim() != 2 || fields.shape()[1] != np {
            return Err(Error::shape(format!("FNO expects [batch, {np}] fields, got {:?}", fields.shape())));
        }
        let out: Vec<Vec<f64>> = fields
            .data()
            .par_chunks(64 * np)
            .map(|chunk| {
                let mut tape = Tape::new();
                let p = self.params.bind_frozen(&mut tape);
                let m = tape.constant(Array::new(vec![chunk.len() / np, np], chunk.to_vec())?);
                let u = self.forward(&mut tape, &p, m)?;
                Ok(tape.value(u).data().to_vec())
            })
            .collect::<Result<_>>()?;
        Array::new(fields.shape().to_vec(), out.concat())
    }

    /// VFPAR1 checkpoint with complex weights interleaved as `[K, W, W, 2]`.
    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let mut out = self.params.clone();
        for &id in &self.spectral {
            let v = out.value_mut(id);
            let half = v.len() / 2;
            let (k, c, o) = (v.shape()[1], v.shape()[2], v.shape()[3]);
            let mut inter = Vec::with_capacity(v.len());
            for i in 0..half {
                inter.push(v.data()[i]);
                inter.push(v.data()[half + i]);
            }
            *v = Array::new(vec![k, c, o, 2], inter)?;
        }
        write_params(w, &out)
    }

    pub fn load<R: Read>(&mut self, r: R) -> Result<()> {
        let records = read_params(r)?;
        if records.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                records.len(),
                self.params.len()
            )));
        }
        let ids: Vec<ParamId> = self.params.ids().collect();
        for (id, (name, value)) in ids.into_iter().zip(records) {
            let target = self.params.get(id);
            let value = if self.spectral.contains(&id) {
                let s = value.shape().to_vec();
                if s.len() != 4 || s[3] != 2 {
                    return Err(Error::Format(format!("spectral record `{name}` has shape {s:?}")));
                }
                let half = value.len() / 2;
                let mut planar = vec![0.0; value.len()];
                for i in 0..half {
                    planar[i] = value.data()[2 * i];
                    planar[half + i] = value.data()[2 * i + 1];
                }
                Array::new(vec![2, s[0], s[1], s[2]], planar)?
            } else {
                value
            };
            if name != target.name || value.shape() != target.value.shape() {
                return Err(Error::Format(format!("checkpoint record `{name}` does not match `{}`", target.name)));
            }
            *self.params.value_mut(id) = value;
        }
        Ok(())
    }
}

/// `mean_i ‖pred_i − truth_i‖ / ‖truth_i‖` over rows of `[B, P]`.
pub fn relative_l2_loss(tape: &mut Tape, pred: Var, truth: &Array) -> Result<Var> {
    let b = truth.shape()[0];
    let inv: Vec<f64> = truth
        .data()
        .chunks(truth.len() / b.max(1))
        .map(|row| {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 && n.is_finite() {
                Ok(1.0 / n)
            } else {
                Err(Error::numeric("relative L2 loss needs truths with positive finite norm"))
            }
        })
        .collect::<Result<_>>()?;
    let t = tape.constant(truth.clone());
    let diff = tape.sub(pred, t)?;
    let sq = tape.square(diff)?;
    let s = tape.sum_axis(sq, 1)?;
    let norm = tape.sqrt(s)?;
    let inv = tape.constant(Array::from_vec(inv));
    let r = tape.mul(norm, inv)?;
    let total = tape.sum(r)?;
    tape.scale(total, 1.0 / b as f64)
}

pub fn relative_l2(pred: &[f64], truth: &[f64]) -> f64 {
    let num: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    let den: f64 = truth.iter().map(|t| t * t).sum();
    (num / den).sqrt()
}

/// Pairs `(m, u)` with provenance ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, P]`
    pub inputs: Array,
    /// `[N, P]`
    pub targets: Array,
    pub ids: Vec<u64>,
}

impl Dataset {
    pub fn new(inputs: Array, targets: Array, ids: Vec<u64>) -> Result<Self> {
        if inputs.shape() != targets.shape() || inputs.ndim() != 2 || ids.len() != inputs.shape()[0] {
            return Err(Error::shape(format!(
                "dataset inputs {:?}, targets {:?}, {} ids",
                inputs.shape(),
                targets.shape(),
                ids.len()
            )));
        }
        Ok(Self { inputs, targets, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn rows(&self, idx: &[usize]) -> Result<(Array, Array)> {
        let p = self.inputs.shape()[1];
        let pick = |a: &Array| {
            let data: Vec<f64> = idx.iter().flat_map(|&i| a.data()[i * p..(i + 1) * p].iter().copied()).collect();
            Array::new(vec![idx.len(), p], data)
        };
        Ok((pick(&self.inputs)?, pick(&self.targets)?))
    }

    /// VFGRID1 concatenation of `(m, u)` record pairs.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let p = self.inputs.shape()[1];
        for i in 0..self.len() {
            write_field(&mut w, &Array::from_vec(self.inputs.data()[i * p..(i + 1) * p].to_vec()))?;
            write_field(&mut w, &Array::from_vec(self.targets.data()[i * p..(i + 1) * p].to_vec()))?;
        }
        Ok(())
    }

    /// Reads pairs written by [`Self::write`]; ids are assigned from `first_id`.
    pub fn read<R: Read>(mut r: R, first_id: u64) -> Result<Self> {
        let (mut inputs, mut targets) = (Vec::new(), Vec::new());
        let mut p = None;
        while let Some(m) = read_field_record(&mut r)? {
            let u = read_field_record(&mut r)?.ok_or_else(|| Error::Format("dataset ends inside a pair".into()))?;
            if m.len() != u.len() || p.is_some_and(|p| p != m.len()) {
                return Err(Error::Format("dataset records have inconsistent sizes".into()));
            }
            p = Some(m.len());
            inputs.extend_from_slice(m.data());
            targets.extend_from_slice(u.data());
        }
        let p = p.unwrap_or(0);
        let n = if p == 0 { 0 } else { inputs.len() / p };
        Self::new(Array::new(vec![n, p], inputs)?, Array::new(vec![n, p], targets)?, (first_id..first_id + n as u64).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Halve the learning rate every this many epochs.
    pub halve_every: usize,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self { epochs: 1000, batch: 25, lr: 1e-3, halve_every: 50 }
    }

    pub fn finetune() -> Self {
        Self { epochs: 100, batch: 25, lr: 1e-3, halve_every: 25 }
    }

    /// Shortened schedule for desk-scale runs: `epochs` epochs with at most
    /// four halvings.
    pub fn rescaled(&self, epochs: usize) -> Self {
        let halvings = (self.epochs / self.halve_every.max(1)).clamp(1, 4);
        Self { epochs, halve_every: (epochs / halvings).max(1), ..self.clone() }
    }
}

/// Adam on the relative-L2 loss; returns the mean training loss per epoch.
fn train(model: &mut FnoModel, data: &Dataset, cfg: &TrainConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    if data.inputs.shape()[1] != model.grid_len() {
        return Err(Error::shape(format!("dataset grid {} != model grid {}", data.inputs.shape()[1], model.grid_len())));
    }
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr * 0.5f64.powi((epoch / cfg.halve_every.max(1)) as i32);
        order.shuffle(rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch.max(1)) {
            let (m, u) = data.rows(idx)?;
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let mv = tape.constant(m);
            let pred = model.forward(&mut tape, &p, mv)?;
            let loss = relative_l2_loss(&mut tape, pred, &u)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::numeric(format!("FNO loss became {lv} in epoch {epoch}")));
            }
            let g = tape.backward(loss)?;
            model.params.zero_grad();
            model.params.accumulate(&g, &p);
            adam.step(&mut model.params)?;
            total += lv * idx.len() as f64;
        }
        history.push(total / data.len() as f64);
    }
    Ok(history)
}

pub fn pretrain(model: &mut FnoModel, data: &Dataset, cfg: &TrainConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::config("pre-training dataset is empty"));
    }
    train(model, data, cfg, rng)
}

/// Continues training on `data` only.
pub fn finetune(model: &mut FnoModel, data: &Dataset, cfg: &TrainConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::config("fine-tuning dataset is empty"));
    }
    train(model, data, cfg, rng)
}

/// Piecewise-linear resampling between grids of the same geometry.
pub fn resample(field: &[f64], geometry: Geometry, from: usize, to: usize) -> Vec<f64> {
    if from == to {
        return field.to_vec();
    }
    let periodic = geometry == Geometry::SquarePeriodic2d;
    let weights: Vec<(usize, usize, f64)> = (0..to)
        .map(|i| {
            let pos = if periodic { i as f64 * from as f64 / to as f64 } else { i as f64 * (from - 1) as f64 / (to - 1) as f64 };
            let lo = (pos.floor() as usize).min(if periodic { from - 1 } else { from - 2 });
            let t = pos - lo as f64;
            let hi = if periodic { (lo + 1) % from } else { lo + 1 };
            (lo, hi, t)
        })
        .collect();
    if geometry.is_2d() {
        let mut rows = vec![0.0; to * from];
        for r in 0..from {
            for (j, &(lo, hi, t)) in weights.iter().enumerate() {
                rows[j * from + r] = (1.0 - t) * field[r * from + lo] + t * field[r * from + hi];
            }
        }
        // `rows` is stored transposed ([to_col][from_row]); interpolate rows next.
        let mut out = vec![0.0; to * to];
        for (i, &(lo, hi, t)) in weights.iter().enumerate() {
            for j in 0..to {
                out[i * to + j] = (1.0 - t) * rows[j * from + lo] + t * rows[j * from + hi];
            }
        }
        out
    } else {
        weights.iter().map(|&(lo, hi, t)| (1.0 - t) * field[lo] + t * field[hi]).collect()
    }
}

/// Links KL coefficients to surrogate inputs, exact states on the surrogate
/// grid and observations.
#[derive(Clone, Debug)]
pub struct FieldMap {
    pub kind: PdeKind,
    pub exact: PdeForward,
    /// KL basis on the surrogate grid.
    pub basis: KlBasis,
    /// Observation operator on the surrogate grid.
    pub obs: ObservationOp,
}

impl FieldMap {
    pub fn new(kind: PdeKind, d: usize, grid: usize) -> Result<Self> {
        let exact = PdeForward::new(kind, d)?;
        let basis = build_basis(&kind.grf(d).with_grid(grid))?;
        let obs = kind.observation_op(grid)?;
        Ok(Self { kind, exact, basis, obs })
    }

    pub fn d(&self) -> usize {
        self.basis.dim()
    }

    pub fn grid(&self) -> usize {
        self.basis.spec.grid
    }

    /// Surrogate inputs `[n, P]` for row-major coefficients.
    pub fn fields(&self, xis: &[Vec<f64>]) -> Result<Array> {
        let flat: Vec<f64> = xis.concat();
        self.basis.synthesize_batch(&flat, xis.len())
    }

    /// Exact state resampled to the surrogate grid.
    pub fn exact_state(&self, xi: &[f64]) -> Result<Vec<f64>> {
        let u = self.exact.state(xi)?;
        Ok(resample(u.data(), self.basis.spec.geometry, self.exact.basis.spec.grid, self.grid()))
    }

    pub fn exact_states(&self, xis: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        xis.par_iter().map(|xi| self.exact_state(xi)).collect()
    }

    pub fn dataset(&self, xis: &[Vec<f64>], first_id: u64) -> Result<Dataset> {
        let inputs = self.fields(xis)?;
        let targets = self.exact_states(xis)?;
        let shape = inputs.shape().to_vec();
        Dataset::new(inputs, Array::new(shape, targets.concat())?, (first_id..first_id + xis.len() as u64).collect())
    }

    /// `n` prior draws `ξ ~ N(0, I)` and their exact states.
    pub fn prior_dataset(&self, n: usize, seed: u64) -> Result<Dataset> {
        let mut r = rng::stream(seed, "prior-dataset");
        let xis: Vec<Vec<f64>> = (0..n).map(|_| rng::normal_vec(&mut r, self.d())).collect();
        self.dataset(&xis, 0)
    }
}

/// FNO plus coefficient map: the composite surrogate `ξ ↦ O(F(m_ξ))`.
#[derive(Clone, Debug)]
pub struct Surrogate {
    pub model: FnoModel,
    pub map: FieldMap,
}

impl Surrogate {
    pub fn new(model: FnoModel, map: FieldMap) -> Result<Self> {
        if model.grid_len() != map.basis.n_points() {
            return Err(Error::shape(format!(
                "FNO grid has {} points, field map {}",
                model.grid_len(),
                map.basis.n_points()
            )));
        }
        Ok(Self { model, map })
    }

    /// Differentiable observations `[B, m]` for coefficients `xi: [B, d]`.
    pub fn observe(&self, tape: &mut Tape, p: &Bound, xi: Var) -> Result<Var> {
        let modes = tape.constant(self.map.basis.scaled_modes());
        let m = tape.matmul(xi, modes)?;
        let shape = tape.shape(m).to_vec();
        let mean = tape.constant(Array::from_vec(self.map.basis.mean.data().to_vec()));
        let mean = tape.broadcast_to(mean, &shape)?;
        let m = tape.add(m, mean)?;
        let u = self.model.forward(tape, p, m)?;
        tape.gather_last(u, &self.map.obs.locations)
    }

    pub fn states(&self, xis: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let u = self.model.predict(&self.map.fields(xis)?)?;
        let p = self.model.grid_len();
        Ok(u.data().chunks(p).map(<[f64]>::to_vec).collect())
    }

    pub fn forward_batch(&self, xis: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.states(xis)?.iter().map(|u| self.map.obs.observe(u)).collect()
    }
}

/// Mean relative L² error of `predict` against exact states at
/// `ξ_ref[..d] + η`, `η ~ N(0, I)`.
pub fn surrogate_fitting_error(
    predict: &dyn Fn(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
    map: &FieldMap,
    xi_ref: &[f64],
    n: usize,
    seed: u64,
) -> Result<f64> {
    let d = map.d();
    if xi_ref.len() < d {
        return Err(Error::shape(format!("reference has {} coefficients, need {d}", xi_ref.len())));
    }
    let mut r = rng::stream(seed, "surrogate-error");
    let xis: Vec<Vec<f64>> =
        (0..n).map(|_| xi_ref[..d].iter().map(|x| x + rng::normal(&mut r)).collect()).collect();
    let exact = map.exact_states(&xis)?;
    let pred = predict(&xis)?;
    Ok(pred.iter().zip(&exact).map(|(p, u)| relative_l2(p, u)).sum::<f64>() / n as f64)
}
