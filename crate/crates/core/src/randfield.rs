//! Karhunen-Loève expansions of Gaussian random fields with covariance
//! `σ²(−Δ + τ²)^(−l)` on the unit interval and unit square.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::difftensor::gemm::{gemm, Mat, MatMut};
use crate::difftensor::Array;
use crate::error::{Error, Result};
use crate::rng;

pub const GRID_MAGIC: &[u8; 7] = b"VFGRID1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Geometry {
    IntervalNeumann1d,
    SquareNeumann2d,
    SquarePeriodic2d,
}

impl Geometry {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "interval-neumann-1d" => Ok(Self::IntervalNeumann1d),
            "square-neumann-2d" => Ok(Self::SquareNeumann2d),
            "square-periodic-2d" => Ok(Self::SquarePeriodic2d),
            other => Err(Error::config(format!("unsupported geometry `{other}`"))),
        }
    }

    pub fn is_2d(self) -> bool {
        !matches!(self, Self::IntervalNeumann1d)
    }

    /// Grid coordinate of index `i` on an axis with `n` points. Neumann grids
    /// include both end points; periodic grids omit the right one.
    pub fn coord(self, i: usize, n: usize) -> f64 {
        match self {
            Self::SquarePeriodic2d => i as f64 / n as f64,
            _ => i as f64 / (n - 1) as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrfSpec {
    pub sigma: f64,
    pub tau: f64,
    pub ell: f64,
    pub geometry: Geometry,
    /// Number of retained coefficients.
    pub d: usize,
    /// Points per axis.
    pub grid: usize,
}

impl GrfSpec {
    pub fn darcy1d(d: usize) -> Self {
        Self { sigma: 2.0, tau: 1.0, ell: 2.0, geometry: Geometry::IntervalNeumann1d, d, grid: 1024 }
    }

    pub fn darcy2d(d: usize) -> Self {
        Self { sigma: 1.0, tau: 2.0, ell: 3.0, geometry: Geometry::SquareNeumann2d, d, grid: 71 }
    }

    pub fn ns2d(d: usize) -> Self {
        Self { sigma: 25.0, tau: 2.0, ell: 2.5, geometry: Geometry::SquarePeriodic2d, d, grid: 128 }
    }

    pub fn with_d(&self, d: usize) -> Self {
        Self { d, ..self.clone() }
    }

    pub fn with_grid(&self, grid: usize) -> Self {
        Self { grid, ..self.clone() }
    }

    pub fn grid_shape(&self) -> Vec<usize> {
        if self.geometry.is_2d() {
            vec![self.grid, self.grid]
        } else {
            vec![self.grid]
        }
    }

    pub fn n_points(&self) -> usize {
        self.grid_shape().iter().product()
    }

    /// Eigenvalue of wavevector `k`.
    pub fn eigenvalue(&self, k: [i64; 2]) -> f64 {
        let k2 = (k[0] * k[0] + k[1] * k[1]) as f64;
        let scale = match self.geometry {
            Geometry::SquarePeriodic2d => 4.0 * PI * PI,
            _ => PI * PI,
        };
        self.sigma * self.sigma * (scale * k2 + self.tau * self.tau).powf(-self.ell)
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.tau > 0.0 && self.ell > 0.0) {
            return Err(Error::config("sigma, tau and ell must be positive"));
        }
        if self.d == 0 {
            return Err(Error::config("need at least one mode"));
        }
        let min_grid = if self.geometry == Geometry::SquarePeriodic2d { 4 } else { 3 };
        if self.grid < min_grid {
            return Err(Error::config(format!("grid {} too coarse", self.grid)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeKind {
    /// `√2 cos(kπx)` on the interval.
    Cosine1d,
    /// Neumann cosine product on the square.
    CosineProduct,
    /// `√2 cos(2π k·x)` on the torus.
    PeriodicCos,
    /// `√2 sin(2π k·x)` on the torus.
    PeriodicSin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    pub k: [i64; 2],
    pub kind: ModeKind,
}

impl Mode {
    /// Eigenfunction value at point `x` (length 1 or 2).
    pub fn eval(&self, x: &[f64]) -> f64 {
        let [k1, k2] = self.k;
        match self.kind {
            ModeKind::Cosine1d => 2f64.sqrt() * (k1 as f64 * PI * x[0]).cos(),
            ModeKind::CosineProduct => {
                if k2 == 0 {
                    2f64.sqrt() * (k1 as f64 * PI * x[0]).cos()
                } else if k1 == 0 {
                    2f64.sqrt() * (k2 as f64 * PI * x[1]).cos()
                } else {
                    2.0 * (k1 as f64 * PI * x[0]).cos() * (k2 as f64 * PI * x[1]).cos()
                }
            }
            ModeKind::PeriodicCos => 2f64.sqrt() * (2.0 * PI * (k1 as f64 * x[0] + k2 as f64 * x[1])).cos(),
            ModeKind::PeriodicSin => 2f64.sqrt() * (2.0 * PI * (k1 as f64 * x[0] + k2 as f64 * x[1])).sin(),
        }
    }
}

/// Ordered KL modes: eigenvalue descending, ties by lexicographic wavevector,
/// each periodic wavevector contributing its cosine then its sine.
pub fn mode_order(spec: &GrfSpec) -> Vec<Mode> {
    let n = spec.grid as i64;
    let mut waves: Vec<[i64; 2]> = Vec::new();
    match spec.geometry {
        Geometry::IntervalNeumann1d => waves.extend((1..=n - 2).map(|k| [k, 0])),
        Geometry::SquareNeumann2d => {
            for k1 in 0..=n - 2 {
                for k2 in 0..=n - 2 {
                    if k1 != 0 || k2 != 0 {
                        waves.push([k1, k2]);
                    }
                }
            }
        }
        Geometry::SquarePeriodic2d => {
            let h = n / 2 - 1;
            for kx in -h..=h {
                for ky in 0..=h {
                    if ky > 0 || kx > 0 {
                        waves.push([kx, ky]);
                    }
                }
            }
        }
    }
    let mut keyed: Vec<(f64, [i64; 2])> = waves.into_iter().map(|k| (spec.eigenvalue(k), k)).collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut modes = Vec::new();
    for (_, k) in keyed {
        match spec.geometry {
            Geometry::IntervalNeumann1d => modes.push(Mode { k, kind: ModeKind::Cosine1d }),
            Geometry::SquareNeumann2d => modes.push(Mode { k, kind: ModeKind::CosineProduct }),
            Geometry::SquarePeriodic2d => {
                modes.push(Mode { k, kind: ModeKind::PeriodicCos });
                modes.push(Mode { k, kind: ModeKind::PeriodicSin });
            }
        }
    }
    modes
}

/// Truncated KL basis evaluated on a grid.
#[derive(Clone, Debug)]
pub struct KlBasis {
    pub spec: GrfSpec,
    pub modes: Vec<Mode>,
    pub eigenvalues: Vec<f64>,
    /// `[d, n_points]`, row `j` is `ψ_j` on the grid.
    pub functions: Array,
    /// Mean field `m̄`, grid-shaped.
    pub mean: Array,
}

pub fn build_basis(spec: &GrfSpec) -> Result<KlBasis> {
    spec.validate()?;
    let mut modes = mode_order(spec);
    if spec.d > modes.len() {
        return Err(Error::config(format!(
            "{} modes requested but the {}-point grid resolves only {}",
            spec.d,
            spec.grid,
            modes.len()
        )));
    }
    modes.truncate(spec.d);
    let eigenvalues = modes.iter().map(|m| spec.eigenvalue(m.k)).collect();
    let points = grid_points(spec);
    let functions = eval_modes(&modes, &points);
    Ok(KlBasis { spec: spec.clone(), modes, eigenvalues, functions, mean: Array::zeros(&spec.grid_shape()) })
}

/// Grid coordinates in row-major order (first axis slowest).
pub fn grid_points(spec: &GrfSpec) -> Vec<Vec<f64>> {
    let n = spec.grid;
    let g = spec.geometry;
    if g.is_2d() {
        (0..n * n).map(|i| vec![g.coord(i / n, n), g.coord(i % n, n)]).collect()
    } else {
        (0..n).map(|i| vec![g.coord(i, n)]).collect()
    }
}

fn eval_modes(modes: &[Mode], points: &[Vec<f64>]) -> Array {
    let mut data = Vec::with_capacity(modes.len() * points.len());
    for m in modes {
        data.extend(points.iter().map(|x| m.eval(x)));
    }
    Array::new(vec![modes.len(), points.len()], data).expect("mode table shape")
}

impl KlBasis {
    pub fn dim(&self) -> usize {
        self.modes.len()
    }

    pub fn n_points(&self) -> usize {
        self.functions.shape()[1]
    }

    pub fn grid_shape(&self) -> &[usize] {
        self.mean.shape()
    }

    pub fn with_mean(mut self, mean: Array) -> Result<Self> {
        if mean.shape() != self.mean.shape() {
            return Err(Error::shape(format!("mean shape {:?} != grid {:?}", mean.shape(), self.mean.shape())));
        }
        self.mean = mean;
        Ok(self)
    }

    /// `[d, n_points]` matrix with rows `√λ_j ψ_j`.
    pub fn scaled_modes(&self) -> Array {
        let p = self.n_points();
        let mut out = self.functions.clone();
        for (j, lam) in self.eigenvalues.iter().enumerate() {
            let s = lam.sqrt();
            out.data_mut()[j * p..(j + 1) * p].iter_mut().for_each(|v| *v *= s);
        }
        out
    }

    /// `m̄ + Σ_j √λ_j ξ_j ψ_j` on the grid.
    pub fn synthesize(&self, xi: &[f64]) -> Result<Array> {
        let batch = self.synthesize_batch(xi, 1)?;
        Array::new(self.grid_shape().to_vec(), batch.into_data())
    }

    /// Synthesizes `n` fields from row-major coefficients `[n, d]`; returns
    /// `[n, n_points]`.
    pub fn synthesize_batch(&self, xi: &[f64], n: usize) -> Result<Array> {
        let d = self.dim();
        if xi.len() != n * d {
            return Err(Error::shape(format!("expected {} coefficients, got {}", n * d, xi.len())));
        }
        let p = self.n_points();
        let scaled: Vec<f64> = xi
            .chunks(d)
            .flat_map(|row| row.iter().zip(&self.eigenvalues).map(|(x, l)| x * l.sqrt()))
            .collect();
        let mut out = Vec::with_capacity(n * p);
        for _ in 0..n {
            out.extend_from_slice(self.mean.data());
        }
        gemm(n, d, p, 1.0, Mat::rm(&scaled, 0, d), Mat::rm(self.functions.data(), 0, p), 1.0, MatMut::rm(&mut out, 0, p));
        Array::new(vec![n, p], out)
    }

    /// Quadrature weights of the discrete L² inner product on the grid:
    /// trapezoid on Neumann grids, uniform on periodic ones.
    pub fn quadrature_weights(&self) -> Vec<f64> {
        let n = self.spec.grid;
        let axis: Vec<f64> = match self.spec.geometry {
            Geometry::SquarePeriodic2d => vec![1.0 / n as f64; n],
            _ => {
                let h = 1.0 / (n - 1) as f64;
                (0..n).map(|i| if i == 0 || i == n - 1 { h / 2.0 } else { h }).collect()
            }
        };
        if self.spec.geometry.is_2d() {
            (0..n * n).map(|i| axis[i / n] * axis[i % n]).collect()
        } else {
            axis
        }
    }

    /// Pointwise prior variance `Σ_j λ_j ψ_j(x)²`.
    pub fn pointwise_variance(&self) -> Vec<f64> {
        let p = self.n_points();
        let mut var = vec![0.0; p];
        for (j, lam) in self.eigenvalues.iter().enumerate() {
            for (v, f) in var.iter_mut().zip(&self.functions.data()[j * p..(j + 1) * p]) {
                *v += lam * f * f;
            }
        }
        var
    }

    /// Evaluates the basis at arbitrary points; returns `[d, points]`.
    pub fn eval_at(&self, points: &[Vec<f64>]) -> Array {
        eval_modes(&self.modes, points)
    }
}

/// Reference field built from 256 coefficients drawn i.i.d. from U[−10, 10].
pub fn make_reference(basis256: &KlBasis, seed: u64) -> Result<(Array, Vec<f64>)> {
    if basis256.dim() != 256 {
        return Err(Error::config(format!("reference basis needs 256 modes, has {}", basis256.dim())));
    }
    let mut r = rng::stream(seed, "reference-field");
    let xi: Vec<f64> = (0..256).map(|_| r.gen_range(-10.0..=10.0)).collect();
    let field = basis256.synthesize(&xi)?;
    Ok((field, xi))
}

pub fn write_field<W: Write>(mut w: W, field: &Array) -> Result<()> {
    w.write_all(GRID_MAGIC)?;
    w.write_all(&(field.ndim() as u32).to_le_bytes())?;
    for &d in field.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in field.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_field<R: Read>(mut r: R) -> Result<Array> {
    let field = read_field_record(&mut r)?.ok_or_else(|| Error::Format("truncated VFGRID1 file".into()))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after VFGRID1 values".into()));
    }
    Ok(field)
}

/// Reads one record of a VFGRID1 concatenation; `None` at a clean end of input.
pub fn read_field_record<R: Read>(r: &mut R) -> Result<Option<Array>> {
    let truncated = |_| Error::Format("truncated VFGRID1 file".into());
    let mut magic = [0u8; 7];
    let mut filled = 0;
    while filled < magic.len() {
        let n = r.read(&mut magic[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(Error::Format("truncated VFGRID1 file".into()));
        }
        filled += n;
    }
    if &magic != GRID_MAGIC {
        return Err(Error::Format("bad magic, expected VFGRID1".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(truncated)?;
    let rank = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8).map_err(truncated)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Some(Array::new(shape, data)?))
}
