//! Reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes that do not
//! depend on a gradient-carrying leaf are never visited by [`Tape::backward`],
//! so frozen sub-graphs cost nothing beyond their forward evaluation.

use super::mat::{gemm_into, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        ta: bool,
        b: Var,
        tb: bool,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Mul(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Cols {
        x: Var,
        start: usize,
    },
    Rows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ElemMax {
        inputs: Vec<Var>,
        winner: Vec<u32>,
    },
    Mean(Vec<Var>),
}

struct Node {
    value: Mat,
    op: Op,
    grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

const LN_EPS: f64 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// A leaf. `grad` marks whether gradients are wanted for it.
    pub fn leaf(&mut self, value: Mat, grad: bool) -> Var {
        self.push(value, Op::Leaf, grad)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = self.value(a).matmul_t(ta, self.value(b), tb);
        let grad = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul { a, ta, b, tb }, grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let grad = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), grad)
    }

    /// Adds a `1 × cols` row (a bias) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.len(), self.value(x).cols(), "add_row width");
        let mut value = self.value(x).clone();
        let cols = value.cols();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r.data()[..cols]) {
                *v += b;
            }
        }
        let grad = self.needs(x) || self.needs(row);
        self.push(value, Op::AddRow { x, row }, grad)
    }

    /// `x·W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Mat::from_vec(va.rows(), va.cols(), data);
        let grad = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), grad)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut value = self.value(x).clone();
        value.scale_assign(s);
        let grad = self.needs(x);
        self.push(value, Op::Scale(x, s), grad)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        let grad = self.needs(x);
        self.push(value, Op::SoftmaxRows(x), grad)
    }

    /// Row-wise layer normalization with per-column gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut value = xhat.clone();
        for i in 0..rows {
            for (j, v) in value.row_mut(i).iter_mut().enumerate() {
                *v = *v * g[j] + b[j];
            }
        }
        let grad = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            grad,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let grad = self.needs(x);
        self.push(value, Op::Gelu(x), grad)
    }

    pub fn cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).cols_range(start, end);
        let grad = self.needs(x);
        self.push(value, Op::Cols { x, start }, grad)
    }

    pub fn rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).rows_range(start, end);
        let grad = self.needs(x);
        self.push(value, Op::Rows { x, start }, grad)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut value = Mat::zeros(rows, total);
        let mut off = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.rows(), rows, "concat_cols rows");
            for i in 0..rows {
                value.row_mut(i)[off..off + v.cols()].copy_from_slice(v.row(i));
            }
            off += v.cols();
        }
        let grad = parts.iter().any(|p| self.needs(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), grad)
    }

    /// Element-wise maximum over equally shaped inputs; ties go to the first.
    pub fn elem_max(&mut self, inputs: &[Var]) -> Var {
        let mut value = self.value(inputs[0]).clone();
        let mut winner = vec![0u32; value.len()];
        for (k, v) in inputs.iter().enumerate().skip(1) {
            let other = self.value(*v);
            assert_eq!(other.shape(), value.shape(), "elem_max shape");
            for (idx, (cur, o)) in value.data_mut().iter_mut().zip(other.data()).enumerate() {
                if *o > *cur {
                    *cur = *o;
                    winner[idx] = k as u32;
                }
            }
        }
        let grad = inputs.iter().any(|p| self.needs(*p));
        self.push(
            value,
            Op::ElemMax {
                inputs: inputs.to_vec(),
                winner,
            },
            grad,
        )
    }

    pub fn mean(&mut self, inputs: &[Var]) -> Var {
        let mut value = self.value(inputs[0]).clone();
        for v in &inputs[1..] {
            value.add_assign(self.value(*v));
        }
        value.scale_assign(1.0 / inputs.len() as f64);
        let grad = inputs.iter().any(|p| self.needs(*p));
        self.push(value, Op::Mean(inputs.to_vec()), grad)
    }

    /// Back-propagates the given output cotangents. Returns one optional
    /// gradient per node, indexed by [`Var::index`].
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(
                self.value(*v).shape(),
                g.shape(),
                "seed shape for node {}",
                v.0
            );
            if !self.needs(*v) {
                continue;
            }
            accumulate(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let node = &self.nodes[idx];
            if !node.grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, ta, b, tb } => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.needs(a) {
                    // C = op(A)op(B): dA = G·op(B)ᵀ (or its transpose when A is transposed).
                    let mut ga = Mat::zeros(va.rows(), va.cols());
                    if ta {
                        gemm_into(vb, tb, g, true, &mut ga, 0.0);
                    } else {
                        gemm_into(g, false, vb, !tb, &mut ga, 0.0);
                    }
                    accumulate(grads, a, ga);
                }
                if self.needs(b) {
                    let mut gb = Mat::zeros(vb.rows(), vb.cols());
                    if tb {
                        gemm_into(g, true, va, ta, &mut gb, 0.0);
                    } else {
                        gemm_into(va, !ta, g, false, &mut gb, 0.0);
                    }
                    accumulate(grads, b, gb);
                }
            }
            &Op::Add(a, b) => {
                if self.needs(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.needs(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            &Op::AddRow { x, row } => {
                if self.needs(x) {
                    accumulate(grads, x, g.clone());
                }
                if self.needs(row) {
                    let rv = self.value(row);
                    let mut gr = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (acc, v) in gr.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, row, Mat::from_vec(rv.rows(), rv.cols(), gr));
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let vb = self.value(b);
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, a, Mat::from_vec(g.rows(), g.cols(), d));
                }
                if self.needs(b) {
                    let va = self.value(a);
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, b, Mat::from_vec(g.rows(), g.cols(), d));
                }
            }
            &Op::Scale(x, s) => {
                let mut gx = g.clone();
                gx.scale_assign(s);
                accumulate(grads, x, gx);
            }
            &Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Mat::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yv, gv)) in gx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - dot);
                    }
                }
                accumulate(grads, x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                let gv = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut gg = vec![0.0; cols];
                    let mut gb = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            gg[j] += g.get(i, j) * xhat.get(i, j);
                            gb[j] += g.get(i, j);
                        }
                    }
                    if self.needs(*gamma) {
                        let s = self.value(*gamma).shape();
                        accumulate(grads, *gamma, Mat::from_vec(s.0, s.1, gg));
                    }
                    if self.needs(*beta) {
                        let s = self.value(*beta).shape();
                        accumulate(grads, *beta, Mat::from_vec(s.0, s.1, gb));
                    }
                }
                if self.needs(*x) {
                    let mut gx = Mat::zeros(rows, cols);
                    let nf = cols as f64;
                    for i in 0..rows {
                        let xh = xhat.row(i);
                        let dxhat: Vec<f64> = (0..cols).map(|j| g.get(i, j) * gv[j]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / nf;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o = inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            &Op::Gelu(x) => {
                let xv = self.value(x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, xv)| gv * gelu_grad(*xv))
                    .collect();
                accumulate(grads, x, Mat::from_vec(g.rows(), g.cols(), d));
            }
            &Op::Cols { x, start } => {
                let xv = self.value(x);
                let mut gx = Mat::zeros(xv.rows(), xv.cols());
                for i in 0..g.rows() {
                    gx.row_mut(i)[start..start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(grads, x, gx);
            }
            &Op::Rows { x, start } => {
                let xv = self.value(x);
                let mut gx = Mat::zeros(xv.rows(), xv.cols());
                let c = xv.cols();
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(grads, x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.needs(*p) {
                        accumulate(grads, *p, g.cols_range(off, off + w));
                    }
                    off += w;
                }
            }
            Op::ElemMax { inputs, winner } => {
                for (k, p) in inputs.iter().enumerate() {
                    if !self.needs(*p) {
                        continue;
                    }
                    let d = g
                        .data()
                        .iter()
                        .zip(winner)
                        .map(|(gv, w)| if *w as usize == k { *gv } else { 0.0 })
                        .collect();
                    accumulate(grads, *p, Mat::from_vec(g.rows(), g.cols(), d));
                }
            }
            Op::Mean(inputs) => {
                let s = 1.0 / inputs.len() as f64;
                for p in inputs {
                    if self.needs(*p) {
                        let mut gp = g.clone();
                        gp.scale_assign(s);
                        accumulate(grads, *p, gp);
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
