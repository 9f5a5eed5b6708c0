//! Reverse-mode automatic differentiation over [`Tensor`] values.

use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{matmul_at_into, matmul_bt_into, Tensor};
use super::NnError;
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    ColSlice(Var, usize),
    Concat(Vec<Var>),
    Min(Var, Var),
    Clamp(Var, f64, f64),
    RepeatRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records one forward evaluation so gradients can be pulled back from a
/// scalar root.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needs them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` if `v` was unreachable.
    pub fn take_or_zeros(&mut self, v: Var, rows: usize, cols: usize) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf (data).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `x + bias` with a `1 x n` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!(bv.shape(), (1, xv.cols), "add_row bias shape mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += *b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddRow(x, bias), ng)
    }

    /// `x * w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Multiplies each row of `x` by the matching entry of the column `col`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (xv, cv) = (self.value(x), self.value(col));
        assert_eq!(cv.shape(), (xv.rows, 1), "mul_col column shape mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows {
            let s = cv.data[r];
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        let ng = self.ng(x) || self.ng(col);
        self.push(out, Op::MulCol(x, col), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn offset(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        let ng = self.ng(x);
        self.push(out, Op::Offset(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::tanh);
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::exp);
        let ng = self.ng(x);
        self.push(out, Op::Exp(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let ng = self.ng(x);
        self.push(out, Op::Square(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: f64 = v.data.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Row sums: `B x n -> B x 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = (0..v.rows).map(|r| v.row(r).iter().sum()).collect();
        let out = Tensor::from_vec(v.rows, 1, data);
        let ng = self.ng(x);
        self.push(out, Op::SumCols(x), ng)
    }

    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).col_slice(start, len);
        let ng = self.ng(x);
        self.push(out, Op::ColSlice(x, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat_cols(&vals);
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::Concat(parts.to_vec()), ng)
    }

    /// Element-wise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| if x <= y { x } else { y });
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Min(a, b), ng)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let ng = self.ng(x);
        self.push(out, Op::Clamp(x, lo, hi), ng)
    }

    /// Broadcasts a `1 x n` row to `rows x n`.
    pub fn repeat_rows(&mut self, x: Var, rows: usize) -> Var {
        let v = self.value(x);
        assert_eq!(v.rows, 1, "repeat_rows expects a row vector");
        let mut out = Tensor::zeros(rows, v.cols);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&v.data);
        }
        let ng = self.ng(x);
        self.push(out, Op::RepeatRows(x), ng)
    }

    /// Pulls gradients back from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, NnError> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(NnError::NonScalarRoot { rows: rv.rows, cols: rv.cols });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.ng(v) {
            return;
        }
        let (r, c) = self.value(v).shape();
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c));
        f(slot);
    }

    fn acc_elementwise(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor, f: impl Fn(usize, f64) -> f64) {
        self.acc(grads, v, |t| {
            for (k, (o, gv)) in t.data.iter_mut().zip(&g.data).enumerate() {
                *o += f(k, *gv);
            }
        });
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |t| matmul_bt_into(g, bv, t));
                self.acc(grads, *b, |t| matmul_at_into(av, g, t));
            }
            Op::AddRow(x, bias) => {
                self.acc_elementwise(grads, *x, g, |_, gv| gv);
                self.acc(grads, *bias, |t| {
                    for r in 0..g.rows {
                        for (o, gv) in t.data.iter_mut().zip(g.row(r)) {
                            *o += *gv;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc_elementwise(grads, *a, g, |_, gv| gv);
                self.acc_elementwise(grads, *b, g, |_, gv| gv);
            }
            Op::Sub(a, b) => {
                self.acc_elementwise(grads, *a, g, |_, gv| gv);
                self.acc_elementwise(grads, *b, g, |_, gv| -gv);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_elementwise(grads, *a, g, |k, gv| gv * bv.data[k]);
                self.acc_elementwise(grads, *b, g, |k, gv| gv * av.data[k]);
            }
            Op::MulCol(x, col) => {
                let (xv, cv) = (self.value(*x), self.value(*col));
                let cols = xv.cols;
                self.acc_elementwise(grads, *x, g, |k, gv| gv * cv.data[k / cols]);
                self.acc(grads, *col, |t| {
                    for r in 0..g.rows {
                        t.data[r] += g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Scale(x, s) => self.acc_elementwise(grads, *x, g, |_, gv| gv * s),
            Op::Offset(x) => self.acc_elementwise(grads, *x, g, |_, gv| gv),
            Op::Relu(x) => {
                self.acc_elementwise(grads, *x, g, |k, gv| if out.data[k] > 0.0 { gv } else { 0.0 })
            }
            Op::Tanh(x) => self.acc_elementwise(grads, *x, g, |k, gv| gv * (1.0 - out.data[k] * out.data[k])),
            Op::Sigmoid(x) => self.acc_elementwise(grads, *x, g, |k, gv| gv * out.data[k] * (1.0 - out.data[k])),
            Op::Exp(x) => self.acc_elementwise(grads, *x, g, |k, gv| gv * out.data[k]),
            Op::Square(x) => {
                let xv = self.value(*x);
                self.acc_elementwise(grads, *x, g, |k, gv| 2.0 * gv * xv.data[k]);
            }
            Op::Sum(x) => {
                let s = g.data[0];
                self.acc(grads, *x, |t| t.data.iter_mut().for_each(|o| *o += s));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                let s = g.data[0] / n;
                self.acc(grads, *x, |t| t.data.iter_mut().for_each(|o| *o += s));
            }
            Op::SumCols(x) => {
                let cols = self.value(*x).cols;
                self.acc(grads, *x, |t| {
                    for (k, o) in t.data.iter_mut().enumerate() {
                        *o += g.data[k / cols];
                    }
                });
            }
            Op::ColSlice(x, start) => {
                let start = *start;
                self.acc(grads, *x, |t| {
                    for r in 0..g.rows {
                        let row = t.row_mut(r);
                        for (o, gv) in row[start..start + g.cols].iter_mut().zip(g.row(r)) {
                            *o += *gv;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols;
                    self.acc(grads, *p, |t| {
                        for r in 0..g.rows {
                            for (o, gv) in t.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *o += *gv;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Min(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_elementwise(grads, *a, g, |k, gv| if av.data[k] <= bv.data[k] { gv } else { 0.0 });
                self.acc_elementwise(grads, *b, g, |k, gv| if av.data[k] <= bv.data[k] { 0.0 } else { gv });
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x);
                self.acc_elementwise(grads, *x, g, |k, gv| {
                    let v = xv.data[k];
                    if v >= *lo && v <= *hi {
                        gv
                    } else {
                        0.0
                    }
                });
            }
            Op::RepeatRows(x) => {
                self.acc(grads, *x, |t| {
                    for r in 0..g.rows {
                        for (o, gv) in t.data.iter_mut().zip(g.row(r)) {
                            *o += *gv;
                        }
                    }
                });
            }
        }
    }
}
