//! Eager reverse-mode tape.
//!
//! Every op computes its value immediately and appends a node; `backward`
//! walks the nodes once in reverse insertion order. Nodes whose inputs are all
//! constants are marked as not needing gradients and are skipped.

use std::sync::Arc;

use super::array::Array;
use super::gemm::{gemm, Mat, MatMut};
use super::spectral::{cmix_backward, cmix_forward, SpectralPlan};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum BroadcastMap {
    /// Input shape is a suffix of the output shape: `in = out % len`.
    Suffix(usize),
    Indexed(Vec<usize>),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Softplus(Var),
    Gelu(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Broadcast(Var, BroadcastMap),
    Reshape(Var),
    Slice { x: Var, start: usize },
    Concat(Vec<Var>),
    Gather { x: Var, idx: Vec<usize> },
    Scatter { x: Var, idx: Vec<usize> },
    Rfft { x: Var, plan: Arc<SpectralPlan>, batch: usize, ch: usize },
    Irfft { y: Var, plan: Arc<SpectralPlan>, batch: usize, ch: usize },
    CMix(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Softplus(..) => "softplus",
            Op::Gelu(..) => "gelu",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Sum(..) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::Broadcast(..) => "broadcast",
            Op::Reshape(..) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat(..) => "concat",
            Op::Gather { .. } => "gather",
            Op::Scatter { .. } => "scatter",
            Op::Rfft { .. } => "rfft",
            Op::Irfft { .. } => "irfft",
            Op::CMix(..) => "cmix",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::CMix(a, b) => {
                vec![*a, *b]
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Softplus(a)
            | Op::Gelu(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::SumAxis(a, _)
            | Op::Broadcast(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::Slice { x, .. } | Op::Gather { x, .. } | Op::Scatter { x, .. } | Op::Rfft { x, .. } => vec![*x],
            Op::Irfft { y, .. } => vec![*y],
            Op::Concat(v) => v.clone(),
        }
    }
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Adjoints of the leaves reachable from a backward root.
pub struct Grads {
    adj: Vec<Option<Array>>,
}

impl Grads {
    /// Adjoint of `v`, or `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.adj.get(v.0).and_then(Option::as_ref)
    }
}

/// Append-only computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn zip_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let w = *shape.last().unwrap_or(&1);
    let rows = if w == 0 { shape[..shape.len() - 1].iter().product() } else { shape.iter().product::<usize>() / w };
    (rows, w)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that gradients flow to (inputs, parameters).
    pub fn variable(&mut self, value: Array) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Array, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::numeric(format!("{} produced non-finite values", op.name())));
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, 1.0, Mat::rm(self.value(a).data(), 0, k), Mat::rm(self.value(b).data(), 0, m), 0.0, MatMut::rm(&mut out, 0, m));
        self.push(Array::new(vec![n, m], out)?, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(Array::new(self.shape(a).to_vec(), v)?, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(Array::new(self.shape(a).to_vec(), v)?, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(Array::new(self.shape(a).to_vec(), v)?, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x / y);
        self.push(Array::new(self.shape(a).to_vec(), v)?, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    /// Sum of all elements, returned as a scalar (shape `[]`).
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Array::scalar(s), Op::Sum(a))
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("sum_axis: axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.push(Array::new(out_shape, out)?, Op::SumAxis(a, axis))
    }

    /// Numpy-style broadcast to `shape` (dimensions aligned from the right).
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        if src.len() > shape.len() {
            return Err(Error::shape(format!("broadcast: {src:?} to {shape:?}")));
        }
        let lead = shape.len() - src.len();
        for (i, &d) in src.iter().enumerate() {
            if d != 1 && d != shape[lead + i] {
                return Err(Error::shape(format!("broadcast: {src:?} to {shape:?}")));
            }
        }
        let n: usize = shape.iter().product();
        let x = self.value(a).data();
        let stripped: Vec<usize> = src.iter().copied().skip_while(|&d| d == 1).collect();
        let is_suffix = shape.ends_with(&stripped);
        let (out, map) = if is_suffix {
            let len = x.len().max(1);
            ((0..n).map(|i| x[i % len]).collect::<Vec<_>>(), BroadcastMap::Suffix(len))
        } else {
            // General case: precompute source index for every output element.
            let mut idx = vec![0usize; n];
            let nd = shape.len();
            let mut src_strides = vec![0usize; nd];
            let mut stride = 1;
            for i in (0..src.len()).rev() {
                src_strides[lead + i] = if src[i] == 1 { 0 } else { stride };
                stride *= src[i];
            }
            let mut counter = vec![0usize; nd];
            for slot in idx.iter_mut() {
                *slot = counter.iter().zip(&src_strides).map(|(c, s)| c * s).sum();
                for d in (0..nd).rev() {
                    counter[d] += 1;
                    if counter[d] < shape[d] {
                        break;
                    }
                    counter[d] = 0;
                }
            }
            (idx.iter().map(|&i| x[i]).collect(), BroadcastMap::Indexed(idx))
        };
        self.push(Array::new(shape.to_vec(), out)?, Op::Broadcast(a, map))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push(v, Op::Reshape(a))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, w) = split_last(&shape);
        if start + len > w {
            return Err(Error::shape(format!("slice {start}..{} of width {w}", start + len)));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x[r * w + start..r * w + start + len]);
        }
        let mut s = shape;
        *s.last_mut().unwrap() = len;
        self.push(Array::new(s, out)?, Op::Slice { x: a, start })
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape(format!("concat: incompatible {:?} and {:?}", self.shape(*first), s)));
            }
            total += s[lead.len()];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let w = *self.shape(*p).last().unwrap();
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut s = lead;
        s.push(total);
        self.push(Array::new(s, out)?, Op::Concat(parts.to_vec()))
    }

    /// `out[..., j] = x[..., idx[j]]`.
    pub fn gather_last(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, w) = split_last(&shape);
        if idx.iter().any(|&i| i >= w) {
            return Err(Error::shape(format!("gather index out of range for width {w}")));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(rows * idx.len());
        for r in 0..rows {
            out.extend(idx.iter().map(|&i| x[r * w + i]));
        }
        let mut s = shape;
        *s.last_mut().unwrap() = idx.len();
        self.push(Array::new(s, out)?, Op::Gather { x: a, idx: idx.to_vec() })
    }

    /// `out[..., idx[j]] = x[..., j]` into a zero array of last-axis `width`.
    pub fn scatter_last(&mut self, a: Var, idx: &[usize], width: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, w) = split_last(&shape);
        if w != idx.len() || idx.iter().any(|&i| i >= width) {
            return Err(Error::shape("scatter index mismatch"));
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; rows * width];
        for r in 0..rows {
            for (j, &i) in idx.iter().enumerate() {
                out[r * width + i] = x[r * w + j];
            }
        }
        let mut s = shape;
        *s.last_mut().unwrap() = width;
        self.push(Array::new(s, out)?, Op::Scatter { x: a, idx: idx.to_vec() })
    }

    /// Truncated real-to-complex transform: `[B, grid.., C] -> [2, B, K, C]`.
    pub fn rfft(&mut self, a: Var, plan: &Arc<SpectralPlan>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let grid = plan.grid_shape();
        if shape.len() != grid.len() + 2 || shape[1..1 + grid.len()] != grid[..] {
            return Err(Error::shape(format!("rfft: input {shape:?} does not match grid {grid:?}")));
        }
        let (batch, ch) = (shape[0], shape[shape.len() - 1]);
        let out = plan.analysis(self.value(a).data(), batch, ch);
        let v = Array::new(vec![2, batch, plan.n_modes(), ch], out)?;
        self.push(v, Op::Rfft { x: a, plan: Arc::clone(plan), batch, ch })
    }

    /// Inverse of the truncated transform: `[2, B, K, C] -> [B, grid.., C]`.
    pub fn irfft(&mut self, a: Var, plan: &Arc<SpectralPlan>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 || shape[0] != 2 || shape[2] != plan.n_modes() {
            return Err(Error::shape(format!("irfft: input {shape:?} has wrong mode layout")));
        }
        let (batch, ch) = (shape[1], shape[3]);
        let out = plan.synthesis(self.value(a).data(), batch, ch, true);
        let mut s = vec![batch];
        s.extend(plan.grid_shape());
        s.push(ch);
        self.push(Array::new(s, out)?, Op::Irfft { y: a, plan: Arc::clone(plan), batch, ch })
    }

    /// Per-mode complex channel mixing: `[2,B,K,C] x [2,K,C,O] -> [2,B,K,O]`.
    pub fn cmix(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[0] != 2 || sw[0] != 2 || sx[2] != sw[1] || sx[3] != sw[2] {
            return Err(Error::shape(format!("cmix: {sx:?} x {sw:?}")));
        }
        let (b, k, ci, co) = (sx[1], sx[2], sx[3], sw[3]);
        let y = cmix_forward(self.value(x).data(), self.value(w).data(), b, k, ci, co);
        self.push(Array::new(vec![2, b, k, co], y)?, Op::CMix(x, w))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(Error::shape(format!("backward root must be scalar, got {:?}", root_val.shape())));
        }
        let mut adj: Vec<Option<Array>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].needs_grad {
            return Ok(Grads { adj });
        }
        adj[root.0] = Some(Array::ones(root_val.shape()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(node, &g, &mut adj)?;
        }
        Ok(Grads { adj })
    }

    fn accumulate(&self, adj: &mut [Option<Array>], v: Var, g: Array) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => existing.axpy(1.0, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Array, adj: &mut [Option<Array>]) -> Result<()> {
        let out = &node.value;
        let like = |v: Var, data: Vec<f64>| Array::new(self.shape(v).to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs_grad(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, 1.0, Mat::rm(g.data(), 0, m), Mat::tr(bv.data(), 0, m), 0.0, MatMut::rm(&mut da, 0, k));
                    self.accumulate(adj, *a, like(*a, da)?);
                }
                if self.needs_grad(*b) {
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, 1.0, Mat::tr(av.data(), 0, k), Mat::rm(g.data(), 0, m), 0.0, MatMut::rm(&mut db, 0, m));
                    self.accumulate(adj, *b, like(*b, db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    self.accumulate(adj, *a, like(*a, zip_map(g, bv, |x, y| x * y))?);
                }
                if self.needs_grad(*b) {
                    self.accumulate(adj, *b, like(*b, zip_map(g, av, |x, y| x * y))?);
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.needs_grad(*a) {
                    self.accumulate(adj, *a, like(*a, zip_map(g, bv, |x, y| x / y))?);
                }
                if self.needs_grad(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = zip_map(g, out, |x, q| x * q);
                    let d: Vec<f64> = t.iter().zip(bv.data()).map(|(x, y)| -x / y).collect();
                    self.accumulate(adj, *b, like(*b, d)?);
                }
            }
            Op::Neg(a) => self.accumulate(adj, *a, g.map(|x| -x)),
            Op::Scale(a, c) => self.accumulate(adj, *a, g.map(|x| c * x)),
            Op::AddScalar(a) => self.accumulate(adj, *a, g.clone()),
            Op::Exp(a) => self.accumulate(adj, *a, like(*a, zip_map(g, out, |x, y| x * y))?),
            Op::Log(a) => {
                let d = zip_map(g, self.value(*a), |x, y| x / y);
                self.accumulate(adj, *a, like(*a, d)?)
            }
            Op::Tanh(a) => self.accumulate(adj, *a, like(*a, zip_map(g, out, |x, y| x * (1.0 - y * y)))?),
            Op::Softplus(a) => {
                let d = zip_map(g, self.value(*a), |x, y| x * sigmoid(y));
                self.accumulate(adj, *a, like(*a, d)?)
            }
            Op::Gelu(a) => {
                let d = zip_map(g, self.value(*a), |x, y| x * gelu_grad(y));
                self.accumulate(adj, *a, like(*a, d)?)
            }
            Op::Square(a) => {
                let d = zip_map(g, self.value(*a), |x, y| 2.0 * x * y);
                self.accumulate(adj, *a, like(*a, d)?)
            }
            Op::Sqrt(a) => self.accumulate(adj, *a, like(*a, zip_map(g, out, |x, y| 0.5 * x / y))?),
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(adj, *a, Array::full(self.shape(*a), s))
            }
            Op::SumAxis(a, axis) => {
                let shape = self.shape(*a);
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for j in 0..len {
                        d[(o * len + j) * inner..(o * len + j + 1) * inner].copy_from_slice(src);
                    }
                }
                self.accumulate(adj, *a, like(*a, d)?)
            }
            Op::Broadcast(a, map) => {
                let mut d = vec![0.0; self.value(*a).len()];
                match map {
                    BroadcastMap::Suffix(len) => {
                        for (i, v) in g.data().iter().enumerate() {
                            d[i % len] += v;
                        }
                    }
                    BroadcastMap::Indexed(idx) => {
                        for (v, &i) in g.data().iter().zip(idx) {
                            d[i] += v;
                        }
                    }
                }
                self.accumulate(adj, *a, like(*a, d)?)
            }
            Op::Reshape(a) => self.accumulate(adj, *a, g.clone().reshape(self.shape(*a))?),
            Op::Slice { x, start } => {
                let (rows, w) = split_last(self.shape(*x));
                let len = *out.shape().last().unwrap();
                let mut d = vec![0.0; rows * w];
                for r in 0..rows {
                    d[r * w + start..r * w + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.accumulate(adj, *x, like(*x, d)?)
            }
            Op::Concat(parts) => {
                let total = *out.shape().last().unwrap();
                let rows = out.len() / total.max(1);
                let mut off = 0;
                for p in parts {
                    let w = *self.shape(*p).last().unwrap();
                    if self.needs_grad(*p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        self.accumulate(adj, *p, like(*p, d)?);
                    }
                    off += w;
                }
            }
            Op::Gather { x, idx } => {
                let (rows, w) = split_last(self.shape(*x));
                let mut d = vec![0.0; rows * w];
                for r in 0..rows {
                    for (j, &i) in idx.iter().enumerate() {
                        d[r * w + i] += g.data()[r * idx.len() + j];
                    }
                }
                self.accumulate(adj, *x, like(*x, d)?)
            }
            Op::Scatter { x, idx } => {
                let width = *out.shape().last().unwrap();
                let rows = out.len() / width.max(1);
                let mut d = Vec::with_capacity(rows * idx.len());
                for r in 0..rows {
                    d.extend(idx.iter().map(|&i| g.data()[r * width + i]));
                }
                self.accumulate(adj, *x, like(*x, d)?)
            }
            Op::Rfft { x, plan, batch, ch } => {
                let d = plan.synthesis(g.data(), *batch, *ch, false);
                self.accumulate(adj, *x, like(*x, d)?)
            }
            Op::Irfft { y, plan, batch, ch } => {
                let mut d = plan.analysis(g.data(), *batch, *ch);
                plan.scale_by_weights(&mut d, *batch, *ch);
                self.accumulate(adj, *y, like(*y, d)?)
            }
            Op::CMix(x, w) => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (b, k, ci, co) = (sx[1], sx[2], sx[3], sw[3]);
                let (dx, dw) = cmix_backward(self.value(*x).data(), self.value(*w).data(), g.data(), b, k, ci, co);
                if self.needs_grad(*x) {
                    self.accumulate(adj, *x, like(*x, dx)?);
                }
                if self.needs_grad(*w) {
                    self.accumulate(adj, *w, like(*w, dw)?);
                }
            }
        }
        Ok(())
    }
}
