//! Small reverse-mode differentiation engine in double precision.
//!
//! A [`Graph`] is a tape: every op appends a node, and [`Graph::backward`]
//! walks the tape in reverse. Trainable tensors live in a [`ParamStore`] and
//! enter a graph through [`Graph::param`]; their gradients are read back with
//! [`Graph::param_grads`]. Image tensors are channels-last, `[B, H, W, C]`, and
//! convolution kernels are `[k, k, C_in, C_out]`.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{invalid, io_err, Error, Result};

/// Probability clamp applied inside [`Graph::bce_mean`].
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return invalid(format!("shape {shape:?} does not hold {} values", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A tape entry: values plus a gradient buffer when the node needs one.
#[derive(Clone, Debug)]
pub struct DiffTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<f64>,
        k: usize,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    GatherCols {
        x: Var,
        idx: Vec<usize>,
    },
    Bce {
        p: Var,
        targets: Vec<f64>,
    },
}

struct Node {
    t: DiffTensor,
    op: Op,
}

/// Row-major GEMM `c = alpha * a·b + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (a.len() > (m - 1) * rsa + (k - 1) * csa));
    assert!(k == 0 || (b.len() > (k - 1) * rsb + (n - 1) * csb));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            t: DiffTensor {
                shape,
                values,
                grad: Vec::new(),
                requires_grad,
            },
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].t.requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].t.values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].t.shape
    }

    pub fn tensor(&self, v: Var) -> &DiffTensor {
        &self.nodes[v.0].t
    }

    /// Gradient of the last `backward` target with respect to `v`; zeros if
    /// no path reached it.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        let t = &self.nodes[v.0].t;
        if t.grad.is_empty() {
            vec![0.0; t.values.len()]
        } else {
            t.grad.clone()
        }
    }

    /// Constant input; gradients are not tracked.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.push(t.shape, t.data, false, Op::Leaf))
    }

    /// Differentiable leaf not backed by a parameter store.
    pub fn variable(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.push(t.shape, t.data, true, Op::Leaf))
    }

    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        let t = &store.tensors[id];
        self.push(t.shape.clone(), t.data.clone(), true, Op::Param(id))
    }

    /// Adds every store tensor in order and returns their handles.
    pub fn params(&mut self, store: &ParamStore) -> Vec<Var> {
        (0..store.len()).map(|id| self.param(store, id)).collect()
    }

    /// Valid cross-correlation plus bias. `x: [B,H,W,C]`, `w: [k,k,C,O]`,
    /// `b: [O]` gives `[B,H-k+1,W-k+1,O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != ws[1] || ws[2] != xs[3] || bs != [ws[3]] {
            return invalid(format!(
                "conv2d shapes incompatible: input {xs:?}, kernel {ws:?}, bias {bs:?}"
            ));
        }
        let (batch, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, o) = (ws[0], ws[3]);
        if k == 0 || k > h || k > wd {
            return invalid(format!("kernel {k} does not fit a {h}x{wd} input"));
        }
        let (ho, wo) = (h - k + 1, wd - k + 1);
        let patch = k * k * c;
        let rows = batch * ho * wo;
        let xv = self.value(x);
        let mut cols = vec![0.0; rows * patch];
        for bi in 0..batch {
            for i in 0..ho {
                for j in 0..wo {
                    let row = ((bi * ho + i) * wo + j) * patch;
                    for di in 0..k {
                        for dj in 0..k {
                            let src = ((bi * h + i + di) * wd + j + dj) * c;
                            let dst = row + (di * k + dj) * c;
                            cols[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                        }
                    }
                }
            }
        }
        let bv = self.value(b);
        let mut out = Vec::with_capacity(rows * o);
        for _ in 0..rows {
            out.extend_from_slice(bv);
        }
        gemm(rows, patch, o, &cols, (patch, 1), self.value(w), (o, 1), 1.0, &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![batch, ho, wo, o], out, rg, Op::Conv2d { x, w, b, cols, k }))
    }

    /// `x: [B,I]`, `w: [I,O]`, `b: [O]` gives `x·w + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return invalid(format!(
                "dense shapes incompatible: input {xs:?}, weights {ws:?}, bias {bs:?}"
            ));
        }
        let (rows, inner, o) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(rows * o);
        for _ in 0..rows {
            out.extend_from_slice(self.value(b));
        }
        gemm(rows, inner, o, self.value(x), (inner, 1), self.value(w), (o, 1), 1.0, &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![rows, o], out, rg, Op::Dense { x, w, b }))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let vals = self.value(a).iter().map(|&v| f(v)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, vals, rg, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |v| v * s, Op::Scale(a, s))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return invalid(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let vals = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, vals, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(vec![], vec![s], rg, Op::Mean(a))
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return invalid(format!("cannot reshape {:?} to {shape:?}", self.shape(a)));
        }
        let vals = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, vals, rg, Op::Reshape(a)))
    }

    /// `out[r, j] = x[r, idx[j]]` for a `[R, M]` input.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || idx.iter().any(|&i| i >= xs[1]) {
            return invalid(format!("column gather {idx:?} invalid for shape {xs:?}"));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xs[0] * idx.len());
        for r in 0..xs[0] {
            out.extend(idx.iter().map(|&i| xv[r * xs[1] + i]));
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![xs[0], idx.len()],
            out,
            rg,
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Mean binary cross entropy of predictions `p` against 0/1 `targets`,
    /// with `p` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_mean(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != targets.len() || pv.is_empty() {
            return invalid(format!(
                "bce_mean needs matching non-empty inputs, got {} predictions and {} targets",
                pv.len(),
                targets.len()
            ));
        }
        let mut s = 0.0;
        for (&pi, &q) in pv.iter().zip(targets) {
            let c = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
            s -= q * c.ln() + (1.0 - q) * (1.0 - c).ln();
        }
        let loss = s / pv.len() as f64;
        let rg = self.rg(p);
        Ok(self.push(
            vec![],
            vec![loss],
            rg,
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
        ))
    }

    fn grad_mut(&mut self, v: Var) -> &mut Vec<f64> {
        let t = &mut self.nodes[v.0].t;
        if t.grad.is_empty() {
            t.grad = vec![0.0; t.values.len()];
        }
        &mut t.grad
    }

    /// Clears every gradient buffer.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.t.grad.clear();
        }
    }

    /// Accumulates d`loss`/d(node) into every node that requires a gradient.
    /// `loss` must be a finite scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return invalid(format!("backward needs a scalar, got shape {:?}", self.shape(loss)));
        }
        if !lv[0].is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {}", lv[0])));
        }
        self.grad_mut(loss)[0] += 1.0;
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].t.requires_grad || self.nodes[idx].t.grad.is_empty() {
                continue;
            }
            let g = std::mem::take(&mut self.nodes[idx].t.grad);
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.propagate(idx, &op, &g);
            self.nodes[idx].op = op;
            self.nodes[idx].t.grad = g;
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, ref cols, k } => {
                let xs = self.shape(x).to_vec();
                let o = self.shape(w)[3];
                let (batch, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
                let (ho, wo) = (h - k + 1, wd - k + 1);
                let patch = k * k * c;
                let rows = batch * ho * wo;
                if self.rg(w) {
                    let mut dw = vec![0.0; patch * o];
                    gemm(patch, rows, o, cols, (1, patch), g, (o, 1), 0.0, &mut dw);
                    add_into(self.grad_mut(w), &dw);
                }
                if self.rg(b) {
                    let db = self.grad_mut(b);
                    for row in g.chunks_exact(o) {
                        add_into(db, row);
                    }
                }
                if self.rg(x) {
                    let mut dcols = vec![0.0; rows * patch];
                    let wv = std::mem::take(&mut self.nodes[w.0].t.values);
                    gemm(rows, o, patch, g, (o, 1), &wv, (1, o), 0.0, &mut dcols);
                    self.nodes[w.0].t.values = wv;
                    let dx = self.grad_mut(x);
                    for bi in 0..batch {
                        for i in 0..ho {
                            for j in 0..wo {
                                let row = ((bi * ho + i) * wo + j) * patch;
                                for di in 0..k {
                                    for dj in 0..k {
                                        let dst = ((bi * h + i + di) * wd + j + dj) * c;
                                        let src = row + (di * k + dj) * c;
                                        add_into(&mut dx[dst..dst + c], &dcols[src..src + c]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let (rows, inner) = (self.shape(x)[0], self.shape(x)[1]);
                let o = self.shape(w)[1];
                if self.rg(w) {
                    let mut dw = vec![0.0; inner * o];
                    gemm(inner, rows, o, self.value(x), (1, inner), g, (o, 1), 0.0, &mut dw);
                    add_into(self.grad_mut(w), &dw);
                }
                if self.rg(b) {
                    let db = self.grad_mut(b);
                    for row in g.chunks_exact(o) {
                        add_into(db, row);
                    }
                }
                if self.rg(x) {
                    let mut dx = vec![0.0; rows * inner];
                    gemm(rows, o, inner, g, (o, 1), self.value(w), (1, o), 0.0, &mut dx);
                    add_into(self.grad_mut(x), &dx);
                }
            }
            Op::Relu(a) => {
                let d: Vec<f64> = self
                    .value(a)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                add_into(self.grad_mut(a), &d);
            }
            Op::Sigmoid(a) => {
                let d: Vec<f64> = self.nodes[idx]
                    .t
                    .values
                    .iter()
                    .zip(g)
                    .map(|(&s, &gi)| gi * s * (1.0 - s))
                    .collect();
                add_into(self.grad_mut(a), &d);
            }
            Op::Abs(a) => {
                let d: Vec<f64> = self
                    .value(a)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| {
                        if v > 0.0 {
                            gi
                        } else if v < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_into(self.grad_mut(a), &d);
            }
            Op::Scale(a, s) => {
                let d: Vec<f64> = g.iter().map(|&gi| gi * s).collect();
                add_into(self.grad_mut(a), &d);
            }
            Op::Add(a, b) => {
                if self.rg(a) {
                    add_into(self.grad_mut(a), g);
                }
                if self.rg(b) {
                    add_into(self.grad_mut(b), g);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(a) {
                    add_into(self.grad_mut(a), g);
                }
                if self.rg(b) {
                    for (d, gi) in self.grad_mut(b).iter_mut().zip(g) {
                        *d -= gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let d: Vec<f64> = self.value(b).iter().zip(g).map(|(v, gi)| v * gi).collect();
                    add_into(self.grad_mut(a), &d);
                }
                if self.rg(b) {
                    let d: Vec<f64> = self.value(a).iter().zip(g).map(|(v, gi)| v * gi).collect();
                    add_into(self.grad_mut(b), &d);
                }
            }
            Op::Sum(a) => {
                for d in self.grad_mut(a).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(a) => {
                let gi = g[0] / self.value(a).len().max(1) as f64;
                for d in self.grad_mut(a).iter_mut() {
                    *d += gi;
                }
            }
            Op::Reshape(a) => add_into(self.grad_mut(a), g),
            Op::GatherCols { x, ref idx } => {
                let m_in = self.shape(x)[1];
                let dx = self.grad_mut(x);
                for (r, row) in g.chunks_exact(idx.len()).enumerate() {
                    for (&i, &gi) in idx.iter().zip(row) {
                        dx[r * m_in + i] += gi;
                    }
                }
            }
            Op::Bce { p, ref targets } => {
                let n = targets.len() as f64;
                let d: Vec<f64> = self
                    .value(p)
                    .iter()
                    .zip(targets)
                    .map(|(&pi, &q)| {
                        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&pi) {
                            0.0
                        } else {
                            g[0] * (pi - q) / (pi * (1.0 - pi)) / n
                        }
                    })
                    .collect();
                add_into(self.grad_mut(p), &d);
            }
        }
    }

    /// Adds each parameter node's gradient into `acc`, indexed by store id.
    pub fn accumulate_param_grads(&self, acc: &mut [Vec<f64>]) {
        for n in &self.nodes {
            if let Op::Param(id) = n.op {
                if !n.t.grad.is_empty() {
                    add_into(&mut acc[id], &n.t.grad);
                }
            }
        }
    }

    /// Parameter gradients indexed by store id, zero where unused.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        let mut acc = store.zero_grads();
        self.accumulate_param_grads(&mut acc);
        acc
    }
}

/// Owned trainable tensors, addressed by insertion order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: Tensor) -> usize {
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Adds a tensor with entries uniform in `±sqrt(1/fan_in)`.
    pub fn push_uniform<R: Rng + ?Sized>(&mut self, shape: Vec<usize>, fan_in: usize, rng: &mut R) -> usize {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
        self.push(Tensor { shape, data })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.len()]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: store.zero_grads(),
            v: store.zero_grads(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != store.len() || grads.iter().zip(&store.tensors).any(|(g, t)| g.len() != t.len()) {
            return invalid("gradient shapes do not match the parameter store");
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((t, g), m), v) in store.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..t.data.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                t.data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QENM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// `"QENM" | version u32 | count u32 | per tensor: ndim u32, dims u64.., f64 data`.
pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + store.num_scalars() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for t in &store.tensors {
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamStore> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(Error::Truncated(format!("checkpoint ends at byte {}", bytes.len())));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = u32_at(take(4)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let ndim = u32_at(take(4)?) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
        }
        let len: usize = shape.iter().product();
        let raw = take(len.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.push(Tensor { shape, data });
    }
    if pos != bytes.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after {count} tensors",
            bytes.len() - pos
        )));
    }
    Ok(store)
}

pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode_params(store)).map_err(io_err(path))
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    decode_params(&fs::read(path).map_err(io_err(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    #[test]
    fn identity_kernel_and_weights() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 2, 3, 1], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let w = g.constant(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = g.constant(vec![1], vec![0.0]).unwrap();
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 3, 1]);
        assert_eq!(g.value(y), g.value(x));

        let x = g.constant(vec![2, 3], vec![1., -2., 3., 0.5, 0., 7.]).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = g.constant(vec![3, 3], eye).unwrap();
        let b = g.constant(vec![3], vec![0.0; 3]).unwrap();
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_stack_shapes() {
        let mut g = Graph::new();
        let mut x = g.constant(vec![1, 8, 8, 2], vec![0.1; 128]).unwrap();
        let mut c = 2;
        for expected in [7, 6, 5] {
            let w = g.constant(vec![2, 2, c, 3], vec![0.01; 4 * c * 3]).unwrap();
            let b = g.constant(vec![3], vec![0.0; 3]).unwrap();
            x = g.conv2d(x, w, b).unwrap();
            c = 3;
            assert_eq!(g.shape(x), &[1, expected, expected, 3]);
        }
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 2, 2, 1], vec![0.0; 4]).unwrap();
        let w = g.constant(vec![3, 3, 1, 1], vec![0.0; 9]).unwrap();
        let b = g.constant(vec![1], vec![0.0]).unwrap();
        assert!(g.conv2d(x, w, b).is_err());
        let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let w = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b3 = g.constant(vec![3], vec![0.0; 3]).unwrap();
        assert!(g.dense(a, w, b3).is_err());
        assert!(g.add(a, b3).is_err());
        assert!(g.constant(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn activations() {
        let mut g = Graph::new();
        let x = g.constant(vec![3], vec![-1.0, 2.0, 0.0]).unwrap();
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0.0, 2.0, 0.0]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s)[2], 0.5);
        let big = g.constant(vec![2], vec![-800.0, 800.0]).unwrap();
        let s = g.sigmoid(big);
        assert!(g.value(s).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn bce_values() {
        let mut g = Graph::new();
        let p = g.constant(vec![4], vec![0.5; 4]).unwrap();
        let l = g.bce_mean(p, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((g.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let p = g.constant(vec![2], vec![0.0, 1.0]).unwrap();
        let l = g.bce_mean(p, &[0.0, 1.0]).unwrap();
        assert!(g.value(l)[0] <= -(1.0 - BCE_EPS).ln() + 1e-15);
        assert!(g.bce_mean(p, &[0.0]).is_err());
    }

    #[test]
    fn reused_tensor_gradients_add() {
        let mut g = Graph::new();
        let x = g.variable(vec![2], vec![1.5, -2.0]).unwrap();
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        // d/dx 2x^2 = 4x
        assert_eq!(g.grad(x), vec![6.0, -8.0]);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut g = Graph::new();
        let x = g.variable(vec![1], vec![f64::NAN]).unwrap();
        let s = g.sum(x);
        assert!(matches!(g.backward(s), Err(Error::NonFinite(_))));
    }

    #[test]
    fn inputs_are_not_mutated() {
        let mut g = Graph::new();
        let x = g.variable(vec![1, 3, 3, 1], (0..9).map(f64::from).collect()).unwrap();
        let w = g.variable(vec![2, 2, 1, 2], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8]).unwrap();
        let b = g.variable(vec![2], vec![0.0, 1.0]).unwrap();
        let before: Vec<Vec<f64>> = [x, w, b].iter().map(|&v| g.value(v).to_vec()).collect();
        let y = g.conv2d(x, w, b).unwrap();
        let s = g.mean(y);
        g.backward(s).unwrap();
        let after: Vec<Vec<f64>> = [x, w, b].iter().map(|&v| g.value(v).to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn adam_zero_gradient_and_quadratic() {
        let mut store = ParamStore::new();
        store.push(Tensor::new(vec![1], vec![3.0]).unwrap());
        let mut opt = Adam::new(&store, AdamConfig::default());
        opt.step(&mut store, &[vec![0.0]]).unwrap();
        assert!((store.get(0).data()[0] - 3.0).abs() < 1e-12);

        let mut opt = Adam::new(
            &store,
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
        );
        for _ in 0..500 {
            let x = store.get(0).data()[0];
            opt.step(&mut store, &[vec![2.0 * (x - 1.0)]]).unwrap();
        }
        assert!((store.get(0).data()[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = rng_for(5, &[1]);
        let mut store = ParamStore::new();
        store.push_uniform(vec![2, 2, 2, 4], 8, &mut rng);
        store.push_uniform(vec![4], 8, &mut rng);
        let bytes = encode_params(&store);
        assert_eq!(decode_params(&bytes).unwrap(), store);
        assert!(matches!(decode_params(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(decode_params(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_params(&long), Err(Error::Integrity(_))));
    }
}
