//! Truncated real discrete Fourier transforms used by spectral convolutions.
//!
//! Only the retained low-frequency modes are ever formed, so the transforms are
//! evaluated as dense products against precomputed cosine/sine tables. This
//! works for any grid size (including odd ones such as 71) and keeps the
//! forward/adjoint pair exact.
//!
//! Spatial tensors are channels-last: `[B, N, C]` or `[B, N1, N2, C]`.
//! Spectral tensors are planar complex: `[2, B, K, C]` with the real plane
//! first. In 2-D the retained modes are `k1 in [0, m) ∪ [N1 - m, N1)` and
//! `k2 in [0, m)`, flattened `k1`-major.

use std::f64::consts::PI;

use super::gemm::{gemm, Mat, MatMut};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Plan1d {
    n: usize,
    modes: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Plan2d {
    n1: usize,
    n2: usize,
    modes: usize,
    cos1: Vec<f64>,
    sin1: Vec<f64>,
    cos2: Vec<f64>,
    sin2: Vec<f64>,
    weights2: Vec<f64>,
}

/// Truncated transform plan over a 1-D or 2-D grid.
#[derive(Clone, Debug)]
pub enum SpectralPlan {
    D1(Plan1d),
    D2(Plan2d),
}

fn tables(freqs: &[usize], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut cos = Vec::with_capacity(freqs.len() * n);
    let mut sin = Vec::with_capacity(freqs.len() * n);
    for &k in freqs {
        for j in 0..n {
            // Reduce the phase index first so large grids keep full accuracy.
            let phase = 2.0 * PI * ((k * j) % n) as f64 / n as f64;
            cos.push(phase.cos());
            sin.push(phase.sin());
        }
    }
    (cos, sin)
}

impl SpectralPlan {
    pub fn new_1d(n: usize, modes: usize) -> Result<Self> {
        if modes == 0 || 2 * modes > n {
            return Err(Error::config(format!("modes {modes} invalid for grid {n}")));
        }
        let freqs: Vec<usize> = (0..modes).collect();
        let (cos, sin) = tables(&freqs, n);
        let weights = freqs
            .iter()
            .map(|&k| if k == 0 { 1.0 } else { 2.0 } / n as f64)
            .collect();
        Ok(SpectralPlan::D1(Plan1d { n, modes, cos, sin, weights }))
    }

    pub fn new_2d(n1: usize, n2: usize, modes: usize) -> Result<Self> {
        if modes == 0 || 2 * modes > n1 || 2 * modes > n2 {
            return Err(Error::config(format!("modes {modes} invalid for grid {n1}x{n2}")));
        }
        let f1: Vec<usize> = (0..modes).chain(n1 - modes..n1).collect();
        let f2: Vec<usize> = (0..modes).collect();
        let (cos1, sin1) = tables(&f1, n1);
        let (cos2, sin2) = tables(&f2, n2);
        let norm = (n1 * n2) as f64;
        let weights2 = f2.iter().map(|&k| if k == 0 { 1.0 } else { 2.0 } / norm).collect();
        Ok(SpectralPlan::D2(Plan2d { n1, n2, modes, cos1, sin1, cos2, sin2, weights2 }))
    }

    /// Spatial dimensions of the grid.
    pub fn grid_shape(&self) -> Vec<usize> {
        match self {
            SpectralPlan::D1(p) => vec![p.n],
            SpectralPlan::D2(p) => vec![p.n1, p.n2],
        }
    }

    pub fn grid_len(&self) -> usize {
        self.grid_shape().iter().product()
    }

    /// Number of retained complex modes `K`.
    pub fn n_modes(&self) -> usize {
        match self {
            SpectralPlan::D1(p) => p.modes,
            SpectralPlan::D2(p) => 2 * p.modes * p.modes,
        }
    }

    /// Inverse-transform weight of each retained mode (flattened order).
    pub fn mode_weights(&self) -> Vec<f64> {
        match self {
            SpectralPlan::D1(p) => p.weights.clone(),
            SpectralPlan::D2(p) => {
                let mut w = Vec::with_capacity(2 * p.modes * p.modes);
                for _ in 0..2 * p.modes {
                    w.extend_from_slice(&p.weights2);
                }
                w
            }
        }
    }

    /// Forward truncated transform `X = sum_n x[n] exp(-i k.n)`.
    pub fn analysis(&self, x: &[f64], batch: usize, ch: usize) -> Vec<f64> {
        let k_total = self.n_modes();
        let mut out = vec![0.0; 2 * batch * k_total * ch];
        let im_off = batch * k_total * ch;
        match self {
            SpectralPlan::D1(p) => {
                for b in 0..batch {
                    let xo = b * p.n * ch;
                    let yo = b * p.modes * ch;
                    gemm(p.modes, p.n, ch, 1.0, Mat::rm(&p.cos, 0, p.n), Mat::rm(x, xo, ch), 0.0, MatMut::rm(&mut out, yo, ch));
                    gemm(p.modes, p.n, ch, -1.0, Mat::rm(&p.sin, 0, p.n), Mat::rm(x, xo, ch), 0.0, MatMut::rm(&mut out, im_off + yo, ch));
                }
            }
            SpectralPlan::D2(p) => {
                let m = p.modes;
                let k1 = 2 * m;
                let mc = m * ch;
                let mut t_re = vec![0.0; batch * p.n1 * mc];
                let mut t_im = vec![0.0; batch * p.n1 * mc];
                for r in 0..batch * p.n1 {
                    let xo = r * p.n2 * ch;
                    gemm(m, p.n2, ch, 1.0, Mat::rm(&p.cos2, 0, p.n2), Mat::rm(x, xo, ch), 0.0, MatMut::rm(&mut t_re, r * mc, ch));
                    gemm(m, p.n2, ch, -1.0, Mat::rm(&p.sin2, 0, p.n2), Mat::rm(x, xo, ch), 0.0, MatMut::rm(&mut t_im, r * mc, ch));
                }
                for b in 0..batch {
                    let to = b * p.n1 * mc;
                    let yo = b * k1 * mc;
                    let c1 = Mat::rm(&p.cos1, 0, p.n1);
                    let s1 = Mat::rm(&p.sin1, 0, p.n1);
                    gemm(k1, p.n1, mc, 1.0, c1, Mat::rm(&t_re, to, mc), 0.0, MatMut::rm(&mut out, yo, mc));
                    gemm(k1, p.n1, mc, 1.0, s1, Mat::rm(&t_im, to, mc), 1.0, MatMut::rm(&mut out, yo, mc));
                    gemm(k1, p.n1, mc, 1.0, c1, Mat::rm(&t_im, to, mc), 0.0, MatMut::rm(&mut out, im_off + yo, mc));
                    gemm(k1, p.n1, mc, -1.0, s1, Mat::rm(&t_re, to, mc), 1.0, MatMut::rm(&mut out, im_off + yo, mc));
                }
            }
        }
        out
    }

    /// `x[n] = sum_k w_k Re(Y_k exp(+i k.n))`. With `weighted == false` all
    /// `w_k = 1`, which is the exact adjoint of [`Self::analysis`]; with
    /// `weighted == true` it is the inverse transform of the truncated spectrum.
    pub fn synthesis(&self, y: &[f64], batch: usize, ch: usize, weighted: bool) -> Vec<f64> {
        let k_total = self.n_modes();
        let im_off = batch * k_total * ch;
        let n_grid = self.grid_len();
        let mut out = vec![0.0; batch * n_grid * ch];
        match self {
            SpectralPlan::D1(p) => {
                let mut yw = y.to_vec();
                if weighted {
                    for plane in 0..2 {
                        for b in 0..batch {
                            for k in 0..p.modes {
                                let o = plane * im_off + (b * p.modes + k) * ch;
                                yw[o..o + ch].iter_mut().for_each(|v| *v *= p.weights[k]);
                            }
                        }
                    }
                }
                for b in 0..batch {
                    let yo = b * p.modes * ch;
                    let xo = b * p.n * ch;
                    gemm(p.n, p.modes, ch, 1.0, Mat::tr(&p.cos, 0, p.n), Mat::rm(&yw, yo, ch), 0.0, MatMut::rm(&mut out, xo, ch));
                    gemm(p.n, p.modes, ch, -1.0, Mat::tr(&p.sin, 0, p.n), Mat::rm(&yw, im_off + yo, ch), 1.0, MatMut::rm(&mut out, xo, ch));
                }
            }
            SpectralPlan::D2(p) => {
                let m = p.modes;
                let k1 = 2 * m;
                let mc = m * ch;
                let mut z_re = vec![0.0; batch * p.n1 * mc];
                let mut z_im = vec![0.0; batch * p.n1 * mc];
                for b in 0..batch {
                    let yo = b * k1 * mc;
                    let zo = b * p.n1 * mc;
                    let c1t = Mat::tr(&p.cos1, 0, p.n1);
                    let s1t = Mat::tr(&p.sin1, 0, p.n1);
                    gemm(p.n1, k1, mc, 1.0, c1t, Mat::rm(y, yo, mc), 0.0, MatMut::rm(&mut z_re, zo, mc));
                    gemm(p.n1, k1, mc, -1.0, s1t, Mat::rm(y, im_off + yo, mc), 1.0, MatMut::rm(&mut z_re, zo, mc));
                    gemm(p.n1, k1, mc, 1.0, c1t, Mat::rm(y, im_off + yo, mc), 0.0, MatMut::rm(&mut z_im, zo, mc));
                    gemm(p.n1, k1, mc, 1.0, s1t, Mat::rm(y, yo, mc), 1.0, MatMut::rm(&mut z_im, zo, mc));
                }
                if weighted {
                    for r in 0..batch * p.n1 {
                        for k in 0..m {
                            let o = r * mc + k * ch;
                            let w = p.weights2[k];
                            z_re[o..o + ch].iter_mut().for_each(|v| *v *= w);
                            z_im[o..o + ch].iter_mut().for_each(|v| *v *= w);
                        }
                    }
                }
                for r in 0..batch * p.n1 {
                    let xo = r * p.n2 * ch;
                    gemm(p.n2, m, ch, 1.0, Mat::tr(&p.cos2, 0, p.n2), Mat::rm(&z_re, r * mc, ch), 0.0, MatMut::rm(&mut out, xo, ch));
                    gemm(p.n2, m, ch, -1.0, Mat::tr(&p.sin2, 0, p.n2), Mat::rm(&z_im, r * mc, ch), 1.0, MatMut::rm(&mut out, xo, ch));
                }
            }
        }
        out
    }

    /// Multiplies every mode of a planar spectral tensor by its inverse weight.
    pub fn scale_by_weights(&self, y: &mut [f64], batch: usize, ch: usize) {
        let w = self.mode_weights();
        let k_total = w.len();
        for plane in 0..2 {
            for b in 0..batch {
                for (k, wk) in w.iter().enumerate() {
                    let o = ((plane * batch + b) * k_total + k) * ch;
                    y[o..o + ch].iter_mut().for_each(|v| *v *= wk);
                }
            }
        }
    }
}

/// Per-mode complex channel mixing `Y[b,k,:] = X[b,k,:] W[k]`.
///
/// `x: [2, B, K, C]`, `w: [2, K, C, O]`, result `[2, B, K, O]`.
pub fn cmix_forward(x: &[f64], w: &[f64], batch: usize, modes: usize, cin: usize, cout: usize) -> Vec<f64> {
    let xi_off = batch * modes * cin;
    let wi_off = modes * cin * cout;
    let yi_off = batch * modes * cout;
    let mut y = vec![0.0; 2 * yi_off];
    for k in 0..modes {
        let xr = Mat::strided(x, k * cin, modes * cin, 1);
        let xi = Mat::strided(x, xi_off + k * cin, modes * cin, 1);
        let wr = Mat::rm(w, k * cin * cout, cout);
        let wi = Mat::rm(w, wi_off + k * cin * cout, cout);
        let yr_off = k * cout;
        let yi_o = yi_off + k * cout;
        let rs = modes * cout;
        gemm(batch, cin, cout, 1.0, xr, wr, 0.0, MatMut::strided(&mut y, yr_off, rs, 1));
        gemm(batch, cin, cout, -1.0, xi, wi, 1.0, MatMut::strided(&mut y, yr_off, rs, 1));
        gemm(batch, cin, cout, 1.0, xr, wi, 0.0, MatMut::strided(&mut y, yi_o, rs, 1));
        gemm(batch, cin, cout, 1.0, xi, wr, 1.0, MatMut::strided(&mut y, yi_o, rs, 1));
    }
    y
}

/// Adjoints of [`cmix_forward`] with respect to `x` and `w`.
pub fn cmix_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    batch: usize,
    modes: usize,
    cin: usize,
    cout: usize,
) -> (Vec<f64>, Vec<f64>) {
    let xi_off = batch * modes * cin;
    let wi_off = modes * cin * cout;
    let gi_off = batch * modes * cout;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for k in 0..modes {
        let gr = Mat::strided(g, k * cout, modes * cout, 1);
        let gi = Mat::strided(g, gi_off + k * cout, modes * cout, 1);
        // w[k] is cin x cout row-major; its transpose has rs = 1, cs = cout.
        let wr_t = Mat::strided(w, k * cin * cout, 1, cout);
        let wi_t = Mat::strided(w, wi_off + k * cin * cout, 1, cout);
        let rs = modes * cin;
        let dxr = k * cin;
        let dxi = xi_off + k * cin;
        gemm(batch, cout, cin, 1.0, gr, wr_t, 0.0, MatMut::strided(&mut dx, dxr, rs, 1));
        gemm(batch, cout, cin, 1.0, gi, wi_t, 1.0, MatMut::strided(&mut dx, dxr, rs, 1));
        gemm(batch, cout, cin, -1.0, gr, wi_t, 0.0, MatMut::strided(&mut dx, dxi, rs, 1));
        gemm(batch, cout, cin, 1.0, gi, wr_t, 1.0, MatMut::strided(&mut dx, dxi, rs, 1));
        // x[:, k, :] transposed: cin x batch with rs = 1, cs = modes * cin.
        let xr_t = Mat::strided(x, k * cin, 1, modes * cin);
        let xi_t = Mat::strided(x, xi_off + k * cin, 1, modes * cin);
        let dwr = k * cin * cout;
        let dwi = wi_off + k * cin * cout;
        gemm(cin, batch, cout, 1.0, xr_t, gr, 0.0, MatMut::rm(&mut dw, dwr, cout));
        gemm(cin, batch, cout, 1.0, xi_t, gi, 1.0, MatMut::rm(&mut dw, dwr, cout));
        gemm(cin, batch, cout, -1.0, xi_t, gr, 0.0, MatMut::rm(&mut dw, dwi, cout));
        gemm(cin, batch, cout, 1.0, xr_t, gi, 1.0, MatMut::rm(&mut dw, dwi, cout));
    }
    (dx, dw)
}
