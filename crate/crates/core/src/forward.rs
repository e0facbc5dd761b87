//! High-fidelity PDE solvers, observation operators and the Gaussian
//! likelihood.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::difftensor::Array;
use crate::error::{Error, Result};
use crate::randfield::{build_basis, make_reference, Geometry, GrfSpec, KlBasis};
use crate::rng;

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!("{name} contains non-finite values")))
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Solves `−(e^m p')' = f` on `[0, 1]` with `p(0) = p(1) = 0` on the vertex
/// grid carried by `m`.
pub fn solve_darcy1d_with(m: &[f64], f: &[f64]) -> Result<Vec<f64>> {
    let n = m.len();
    if f.len() != n || n < 3 {
        return Err(Error::shape(format!("darcy1d: field {} / source {} points", n, f.len())));
    }
    check_finite("log-permeability", m)?;
    let h2 = ((n - 1) as f64).powi(-2);
    let k: Vec<f64> = m.iter().map(|v| v.exp()).collect();
    let face: Vec<f64> = (0..n - 1).map(|i| harmonic(k[i], k[i + 1])).collect();
    // Thomas elimination on the interior unknowns 1..n-1.
    let ni = n - 2;
    let mut c = vec![0.0; ni];
    let mut d = vec![0.0; ni];
    for j in 0..ni {
        let i = j + 1;
        let lower = -face[i - 1];
        let diag = face[i - 1] + face[i];
        let upper = -face[i];
        let rhs = f[i] * h2;
        let (cp, dp) = if j == 0 { (0.0, 0.0) } else { (c[j - 1], d[j - 1]) };
        let denom = diag - lower * cp;
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::numeric("darcy1d: singular tridiagonal system"));
        }
        c[j] = upper / denom;
        d[j] = (rhs - lower * dp) / denom;
    }
    let mut p = vec![0.0; n];
    for j in (0..ni).rev() {
        let next = if j + 1 < ni { p[j + 2] } else { 0.0 };
        p[j + 1] = d[j] - c[j] * next;
    }
    check_finite("darcy1d pressure", &p)?;
    Ok(p)
}

/// 1D Darcy with unit source.
pub fn solve_darcy1d(m: &[f64]) -> Result<Vec<f64>> {
    solve_darcy1d_with(m, &vec![1.0; m.len()])
}

/// Three-level source of the 2D Darcy problem, depending on `x2` only.
pub fn darcy2d_source(x2: f64) -> f64 {
    if x2 <= 4.0 / 6.0 {
        1000.0
    } else if x2 <= 5.0 / 6.0 {
        2000.0
    } else {
        3000.0
    }
}

/// Solves `−∇·(e^m ∇p) = f` on the unit square with `p = 0` on the boundary.
/// `m` and `f` are `n x n` vertex grids indexed `[i1, i2]`; the returned
/// pressure includes the (zero) boundary nodes.
pub fn solve_darcy2d_with(m: &Array, f: &Array) -> Result<Array> {
    let shape = m.shape();
    if shape.len() != 2 || shape[0] != shape[1] || f.shape() != shape || shape[0] < 3 {
        return Err(Error::shape(format!("darcy2d: field {:?}, source {:?}", shape, f.shape())));
    }
    check_finite("log-permeability", m.data())?;
    let n = shape[0];
    let ni = n - 2;
    let h2 = ((n - 1) as f64).powi(-2);
    let k: Vec<f64> = m.data().iter().map(|v| v.exp()).collect();
    let at = |i: usize, j: usize| i * n + j;
    // Transmissibilities of the four faces of each interior node.
    let mut tw = vec![0.0; ni * ni];
    let mut te = vec![0.0; ni * ni];
    let mut ts = vec![0.0; ni * ni];
    let mut tn = vec![0.0; ni * ni];
    let mut rhs = vec![0.0; ni * ni];
    for a in 0..ni {
        for b in 0..ni {
            let (i, j) = (a + 1, b + 1);
            let u = a * ni + b;
            let kc = k[at(i, j)];
            tw[u] = harmonic(kc, k[at(i - 1, j)]);
            te[u] = harmonic(kc, k[at(i + 1, j)]);
            ts[u] = harmonic(kc, k[at(i, j - 1)]);
            tn[u] = harmonic(kc, k[at(i, j + 1)]);
            rhs[u] = f.data()[at(i, j)] * h2;
        }
    }
    let diag: Vec<f64> = (0..ni * ni).map(|u| tw[u] + te[u] + ts[u] + tn[u]).collect();
    let apply = |x: &[f64], y: &mut [f64]| {
        for a in 0..ni {
            for b in 0..ni {
                let u = a * ni + b;
                let mut v = diag[u] * x[u];
                if a > 0 {
                    v -= tw[u] * x[u - ni];
                }
                if a + 1 < ni {
                    v -= te[u] * x[u + ni];
                }
                if b > 0 {
                    v -= ts[u] * x[u - 1];
                }
                if b + 1 < ni {
                    v -= tn[u] * x[u + 1];
                }
                y[u] = v;
            }
        }
    };
    let x = pcg(&apply, &diag, &rhs, 1e-10, 10 * ni * ni)?;
    let mut p = vec![0.0; n * n];
    for a in 0..ni {
        for b in 0..ni {
            p[at(a + 1, b + 1)] = x[a * ni + b];
        }
    }
    Array::new(vec![n, n], p)
}

/// 2D Darcy with the three-level source.
pub fn solve_darcy2d(m: &Array) -> Result<Array> {
    let n = m.shape().first().copied().unwrap_or(0);
    let mut f = Array::zeros(m.shape());
    if m.ndim() == 2 && n > 1 {
        for i in 0..n {
            for j in 0..n {
                f.data_mut()[i * n + j] = darcy2d_source(j as f64 / (n - 1) as f64);
            }
        }
    }
    solve_darcy2d_with(m, &f)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradients to relative residual `tol`.
fn pcg(apply: &dyn Fn(&[f64], &mut [f64]), diag: &[f64], b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    for _ in 0..max_iter {
        apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rnorm = dot(&r, &r).sqrt();
        if !rnorm.is_finite() {
            return Err(Error::numeric("pcg: non-finite residual"));
        }
        if rnorm <= tol * bnorm {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::Solver(format!("pcg did not reach residual {tol:e} in {max_iter} iterations")))
}

/// Settings of the periodic vorticity solver.
#[derive(Clone, Debug, PartialEq)]
pub struct NsSettings {
    pub nu: f64,
    pub dt: f64,
    pub steps: usize,
    /// Whether the default forcing is applied.
    pub forcing: bool,
}

impl Default for NsSettings {
    fn default() -> Self {
        Self { nu: 1e-2, dt: 1e-2, steps: 100, forcing: true }
    }
}

/// Default forcing `0.1 (sin(2π(x1+x2)) + cos(2π(x1+x2)))`.
pub fn ns_forcing(x1: f64, x2: f64) -> f64 {
    let a = 2.0 * PI * (x1 + x2);
    0.1 * (a.sin() + a.cos())
}

struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { n, fwd: planner.plan_fft_forward(n), inv: planner.plan_fft_inverse(n) }
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let n = self.n;
        let plan = if inverse { &self.inv } else { &self.fwd };
        plan.process(data);
        transpose(data, n);
        plan.process(data);
        transpose(data, n);
        if inverse {
            let s = 1.0 / (n * n) as f64;
            data.iter_mut().for_each(|v| *v *= s);
        }
    }

    fn forward_real(&self, x: &[f64]) -> Vec<Complex64> {
        let mut c: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut c, false);
        c
    }

    fn inverse_real(&self, mut c: Vec<Complex64>) -> Vec<f64> {
        self.transform(&mut c, true);
        c.into_iter().map(|v| v.re).collect()
    }
}

fn transpose(a: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in i + 1..n {
            a.swap(i * n + j, j * n + i);
        }
    }
}

/// Signed integer wavenumber of FFT index `i`.
fn wavenumber(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Pseudo-spectral vorticity solver on the periodic unit square.
pub struct NsSolver {
    n: usize,
    settings: NsSettings,
    fft: Fft2,
    /// `2π k1`, `2π k2` per spectral index.
    kx: Vec<f64>,
    ky: Vec<f64>,
    /// `|2πk|²`.
    k2: Vec<f64>,
    dealias: Vec<bool>,
    forcing_hat: Vec<Complex64>,
}

impl NsSolver {
    pub fn new(n: usize, settings: NsSettings) -> Self {
        let fft = Fft2::new(n);
        let mut kx = vec![0.0; n * n];
        let mut ky = vec![0.0; n * n];
        let mut k2 = vec![0.0; n * n];
        let mut dealias = vec![false; n * n];
        let cutoff = n as f64 / 3.0;
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (wavenumber(i, n), wavenumber(j, n));
                let u = i * n + j;
                kx[u] = 2.0 * PI * a;
                ky[u] = 2.0 * PI * b;
                k2[u] = kx[u] * kx[u] + ky[u] * ky[u];
                dealias[u] = a.abs() < cutoff && b.abs() < cutoff;
            }
        }
        let forcing: Vec<f64> = (0..n * n)
            .map(|u| {
                if settings.forcing {
                    ns_forcing((u / n) as f64 / n as f64, (u % n) as f64 / n as f64)
                } else {
                    0.0
                }
            })
            .collect();
        let forcing_hat = fft.forward_real(&forcing);
        Self { n, settings, fft, kx, ky, k2, dealias, forcing_hat }
    }

    /// `−u·∇ω + f` in spectral space, with the advection term dealiased.
    fn rhs(&self, w: &[Complex64]) -> Vec<Complex64> {
        let nn = self.n * self.n;
        let i = Complex64::new(0.0, 1.0);
        let mut u_hat = vec![Complex64::default(); nn];
        let mut v_hat = vec![Complex64::default(); nn];
        let mut wx_hat = vec![Complex64::default(); nn];
        let mut wy_hat = vec![Complex64::default(); nn];
        for q in 0..nn {
            let wq = if self.dealias[q] { w[q] } else { Complex64::default() };
            let psi = if self.k2[q] > 0.0 { wq / self.k2[q] } else { Complex64::default() };
            // u = ∂ψ/∂x2, v = −∂ψ/∂x1
            u_hat[q] = i * self.ky[q] * psi;
            v_hat[q] = -i * self.kx[q] * psi;
            wx_hat[q] = i * self.kx[q] * wq;
            wy_hat[q] = i * self.ky[q] * wq;
        }
        let u = self.fft.inverse_real(u_hat);
        let v = self.fft.inverse_real(v_hat);
        let wx = self.fft.inverse_real(wx_hat);
        let wy = self.fft.inverse_real(wy_hat);
        let adv: Vec<f64> = (0..nn).map(|q| u[q] * wx[q] + v[q] * wy[q]).collect();
        let mut out = self.fft.forward_real(&adv);
        for q in 0..nn {
            out[q] = if self.dealias[q] { -out[q] } else { Complex64::default() };
            out[q] += self.forcing_hat[q];
        }
        out
    }

    /// Evolves `omega0` (`n x n`) to the final time; `observer` sees the
    /// physical field after every step.
    pub fn run_with(&self, omega0: &Array, mut observer: impl FnMut(usize, &[f64])) -> Result<Array> {
        let n = self.n;
        if omega0.shape() != [n, n] {
            return Err(Error::shape(format!("ns2d expects [{n}, {n}], got {:?}", omega0.shape())));
        }
        check_finite("initial vorticity", omega0.data())?;
        let dt = self.settings.dt;
        let nu = self.settings.nu;
        let mut w = self.fft.forward_real(omega0.data());
        let lhs: Vec<f64> = self.k2.iter().map(|k| 1.0 + 0.5 * nu * dt * k).collect();
        let expl: Vec<f64> = self.k2.iter().map(|k| 1.0 - 0.5 * nu * dt * k).collect();
        for step in 0..self.settings.steps {
            let n0 = self.rhs(&w);
            let pred: Vec<Complex64> =
                (0..n * n).map(|q| (expl[q] * w[q] + dt * n0[q]) / lhs[q]).collect();
            let n1 = self.rhs(&pred);
            for q in 0..n * n {
                w[q] = (expl[q] * w[q] + 0.5 * dt * (n0[q] + n1[q])) / lhs[q];
            }
            let phys = self.fft.inverse_real(w.clone());
            if !phys.iter().all(|v| v.is_finite()) {
                return Err(Error::numeric(format!("ns2d state became non-finite at step {}", step + 1)));
            }
            observer(step + 1, &phys);
        }
        Array::new(vec![n, n], self.fft.inverse_real(w))
    }

    pub fn run(&self, omega0: &Array) -> Result<Array> {
        self.run_with(omega0, |_, _| {})
    }
}

/// NS vorticity at the final time with default settings.
pub fn solve_ns2d(omega0: &Array) -> Result<Array> {
    let n = omega0.shape().first().copied().unwrap_or(0);
    NsSolver::new(n, NsSettings::default()).run(omega0)
}

/// Nearest-grid point sampling at fixed flat indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationOp {
    pub locations: Vec<usize>,
    pub grid_shape: Vec<usize>,
}

impl ObservationOp {
    pub fn new(locations: Vec<usize>, grid_shape: Vec<usize>) -> Result<Self> {
        let total: usize = grid_shape.iter().product();
        if let Some(bad) = locations.iter().find(|&&l| l >= total) {
            return Err(Error::config(format!("observation index {bad} outside grid of {total} points")));
        }
        Ok(Self { locations, grid_shape })
    }

    /// `m` interior points `x_j = j/(m+1)` on a 1D grid.
    pub fn uniform_1d(geometry: Geometry, n: usize, m: usize) -> Result<Self> {
        let idx = (1..=m).map(|j| nearest_index(geometry, j as f64 / (m + 1) as f64, n)).collect();
        Self::new(idx, vec![n])
    }

    /// `per_axis²` interior lattice points `x_i = i/(per_axis+1)` on a square grid.
    pub fn uniform_2d(geometry: Geometry, n: usize, per_axis: usize) -> Result<Self> {
        let axis: Vec<usize> =
            (1..=per_axis).map(|j| nearest_index(geometry, j as f64 / (per_axis + 1) as f64, n)).collect();
        let idx = axis.iter().flat_map(|&a| axis.iter().map(move |&b| a * n + b)).collect();
        Self::new(idx, vec![n, n])
    }

    pub fn count(&self) -> usize {
        self.locations.len()
    }

    pub fn observe(&self, u: &[f64]) -> Result<Vec<f64>> {
        let total: usize = self.grid_shape.iter().product();
        if u.len() != total {
            return Err(Error::shape(format!("field has {} points, operator expects {total}", u.len())));
        }
        Ok(self.locations.iter().map(|&l| u[l]).collect())
    }

    /// Physical coordinates of the observation points.
    pub fn coordinates(&self, geometry: Geometry) -> Vec<Vec<f64>> {
        let n = self.grid_shape[0];
        self.locations
            .iter()
            .map(|&l| {
                if self.grid_shape.len() == 2 {
                    vec![geometry.coord(l / n, n), geometry.coord(l % n, n)]
                } else {
                    vec![geometry.coord(l, n)]
                }
            })
            .collect()
    }
}

fn nearest_index(geometry: Geometry, x: f64, n: usize) -> usize {
    match geometry {
        Geometry::SquarePeriodic2d => ((x * n as f64).round() as usize) % n,
        _ => (x * (n - 1) as f64).round() as usize,
    }
}

/// Gaussian likelihood with diagonal noise covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Likelihood {
    pub y: Vec<f64>,
    pub noise_std: f64,
    /// Diagonal of `Σ_η`.
    pub noise_var: Vec<f64>,
    pub locations: Vec<usize>,
    pub seed: u64,
}

impl Likelihood {
    pub fn new(y: Vec<f64>, noise_std: f64) -> Result<Self> {
        if !(noise_std > 0.0) {
            return Err(Error::config("noise_std must be positive"));
        }
        let noise_var = vec![noise_std * noise_std; y.len()];
        Ok(Self { y, noise_std, noise_var, locations: Vec::new(), seed: 0 })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let lik: Self = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        if lik.noise_var.len() != lik.y.len() {
            return Err(Error::Format("noise_var and y lengths differ".into()));
        }
        Ok(lik)
    }
}

/// `y = G + δ max|G| η` with `η ~ N(0, I)` drawn from the `seed` stream.
pub fn gen_observation(clean: &[f64], delta: f64, seed: u64) -> Likelihood {
    let noise_std = delta * clean.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut r = rng::stream(seed, "observation-noise");
    let y = clean.iter().map(|g| g + noise_std * rng::normal(&mut r)).collect();
    Likelihood { y, noise_std, noise_var: vec![noise_std * noise_std; clean.len()], locations: Vec::new(), seed }
}

/// `Φ = ½ ‖Σ_η^{−1/2}(y − G)‖²`.
pub fn misfit(g: &[f64], lik: &Likelihood) -> Result<f64> {
    if g.len() != lik.y.len() {
        return Err(Error::shape(format!("prediction has {} entries, data {}", g.len(), lik.y.len())));
    }
    if lik.noise_var.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::config("noise variance must be positive"));
    }
    Ok(0.5 * g.iter().zip(&lik.y).zip(&lik.noise_var).map(|((g, y), v)| (y - g).powi(2) / v).sum::<f64>())
}

/// `−Φ(ξ) − ½‖ξ − μ₀‖²` given the forward prediction `g = G(ξ)`.
pub fn log_unnorm_posterior(xi: &[f64], g: &[f64], lik: &Likelihood, prior_mean: &[f64]) -> Result<f64> {
    if xi.len() != prior_mean.len() {
        return Err(Error::shape("prior mean length differs from parameter length"));
    }
    let prior: f64 = xi.iter().zip(prior_mean).map(|(x, m)| (x - m).powi(2)).sum();
    Ok(-misfit(g, lik)? - 0.5 * prior)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PdeKind {
    Darcy1d,
    Darcy2d,
    Ns2d,
}

impl PdeKind {
    pub fn grf(self, d: usize) -> GrfSpec {
        match self {
            PdeKind::Darcy1d => GrfSpec::darcy1d(d),
            PdeKind::Darcy2d => GrfSpec::darcy2d(d),
            PdeKind::Ns2d => GrfSpec::ns2d(d),
        }
    }

    pub fn observation_op(self, grid: usize) -> Result<ObservationOp> {
        match self {
            PdeKind::Darcy1d => ObservationOp::uniform_1d(Geometry::IntervalNeumann1d, grid, 31),
            PdeKind::Darcy2d => ObservationOp::uniform_2d(Geometry::SquareNeumann2d, grid, 6),
            PdeKind::Ns2d => ObservationOp::uniform_2d(Geometry::SquarePeriodic2d, grid, 6),
        }
    }

    /// Solution field (grid-shaped) for a parameter field.
    pub fn solve(self, m: &Array) -> Result<Array> {
        match self {
            PdeKind::Darcy1d => Ok(Array::from_vec(solve_darcy1d(m.data())?)),
            PdeKind::Darcy2d => solve_darcy2d(m),
            PdeKind::Ns2d => solve_ns2d(m),
        }
    }
}

/// Exact forward map `ξ ↦ O(S(m_ξ))` of a PDE problem.
#[derive(Clone, Debug)]
pub struct PdeForward {
    pub kind: PdeKind,
    pub basis: KlBasis,
    pub obs: ObservationOp,
}

impl PdeForward {
    pub fn new(kind: PdeKind, d: usize) -> Result<Self> {
        let spec = kind.grf(d);
        let basis = build_basis(&spec)?;
        let obs = kind.observation_op(spec.grid)?;
        Ok(Self { kind, basis, obs })
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn field(&self, xi: &[f64]) -> Result<Array> {
        self.basis.synthesize(xi)
    }

    pub fn state(&self, xi: &[f64]) -> Result<Array> {
        self.kind.solve(&self.field(xi)?)
    }

    pub fn forward(&self, xi: &[f64]) -> Result<Vec<f64>> {
        self.obs.observe(self.state(xi)?.data())
    }

    /// Forward map over many parameter vectors on the rayon pool.
    pub fn forward_batch(&self, xis: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        xis.par_iter().map(|xi| self.forward(xi)).collect()
    }

    pub fn states_batch(&self, xis: &[Vec<f64>]) -> Result<Vec<Array>> {
        xis.par_iter().map(|xi| self.state(xi)).collect()
    }
}

/// A synthetic inverse problem: reference truth, exact forward map and data.
#[derive(Clone, Debug)]
pub struct Problem {
    pub forward: PdeForward,
    pub reference_field: Array,
    /// All 256 reference coefficients; inversion targets the first `d`.
    pub reference_xi: Vec<f64>,
    pub likelihood: Likelihood,
    pub delta: f64,
}

impl Problem {
    pub fn generate(kind: PdeKind, d: usize, delta: f64, seed: u64) -> Result<Self> {
        let forward = PdeForward::new(kind, d)?;
        let basis256 = build_basis(&kind.grf(256))?;
        let (reference_field, reference_xi) = make_reference(&basis256, seed)?;
        let clean = forward.obs.observe(kind.solve(&reference_field)?.data())?;
        let mut likelihood = gen_observation(&clean, delta, seed);
        likelihood.locations = forward.obs.locations.clone();
        Ok(Self { forward, reference_field, reference_xi, likelihood, delta })
    }

    pub fn d(&self) -> usize {
        self.forward.dim()
    }
}
