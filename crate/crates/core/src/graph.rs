//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly; node order is a valid
//! topological order, so [`Graph::backward`] is a single reverse sweep.

use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::kernels::{self, NormMode};
use crate::losses::{self, SegLossTerms};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Resize(Var),
    CatRows(Vec<Var>),
    CatCols(Vec<Var>),
    NarrowRows {
        x: Var,
        start: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Softmax(Var),
    Reshape(Var),
    SegLoss {
        logits: Var,
        grad: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0[v.0].take()
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// `y = W x + b` applied to every column of a `[in, ...]` tensor.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (rows, cols) = xv.rows_cols();
        let out = match wv.shape() {
            &[o, i] if i == rows => o,
            s => return shape_err(format!("linear weight {s:?} for input {:?}", xv.shape())),
        };
        let mut y = vec![0.0; out * cols];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [out] {
                return shape_err(format!("linear bias {:?}, expected [{out}]", bv.shape()));
            }
            for (o, &v) in bv.data().iter().enumerate() {
                y[o * cols..(o + 1) * cols].fill(v);
            }
        }
        kernels::gemm(out, rows, cols, wv.data(), false, xv.data(), false, &mut y, 1.0);
        let mut shape = xv.shape().to_vec();
        shape[0] = out;
        let y = Tensor::new(&shape, y)?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let y = self.value(a).map(|v| v * s);
        self.push(y, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let y = self.value(a).map(kernels::gelu);
        self.push(y, Op::Gelu(a))
    }

    pub fn norm(&mut self, x: Var, gamma: Var, beta: Var, mode: NormMode) -> Result<Var> {
        let y = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), mode)?;
        let (xhat, rstd) = kernels::normalize(self.value(x), mode);
        Ok(self.push(
            y,
            Op::Norm {
                x,
                gamma,
                beta,
                mode,
                xhat,
                rstd,
            },
        ))
    }

    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let y = kernels::resize_bilinear(self.value(x), oh, ow)?;
        Ok(self.push(y, Op::Resize(x)))
    }

    /// Concatenate along the leading (channel) dimension.
    pub fn cat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::cat_rows(&vals)?;
        Ok(self.push(y, Op::CatRows(parts.to_vec())))
    }

    /// Concatenate `[rows, n_i]` matrices along columns (the token axis).
    pub fn cat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows_cols().0,
            None => return Err(crate::Error::Empty("column concatenation".into())),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).rows_cols();
            if r != rows {
                return shape_err(format!("cat_cols row count {r} vs {rows}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &c) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + c].copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let y = Tensor::new(&[rows, total], data)?;
        Ok(self.push(y, Op::CatCols(parts.to_vec())))
    }

    pub fn narrow_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).narrow_rows(start, len)?;
        Ok(self.push(y, Op::NarrowRows { x, start }))
    }

    /// Matrix product of rank-2 values, optionally transposing either side.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ar, ac) = match av.shape() {
            &[r, c] => (r, c),
            s => return shape_err(format!("matmul lhs {s:?}")),
        };
        let (br, bc) = match bv.shape() {
            &[r, c] => (r, c),
            s => return shape_err(format!("matmul rhs {s:?}")),
        };
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return shape_err(format!("matmul inner dims {k} vs {k2}"));
        }
        let mut y = vec![0.0; m * n];
        kernels::gemm(m, k, n, av.data(), ta, bv.data(), tb, &mut y, 0.0);
        let y = Tensor::new(&[m, n], y)?;
        Ok(self.push(y, Op::MatMul { a, b, ta, tb }))
    }

    /// Row-wise softmax of a rank-2 value.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = match av.shape() {
            &[r, c] => (r, c),
            s => return shape_err(format!("softmax expects rank 2, got {s:?}")),
        };
        let mut y = av.data().to_vec();
        for row in y.chunks_mut(c.max(1)).take(r) {
            softmax_in_place(row);
        }
        let y = Tensor::new(&[r, c], y)?;
        Ok(self.push(y, Op::Softmax(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(a)))
    }

    /// Dice + weighted IoU + weighted BCE of an `[H, W]` logit map.
    pub fn seg_loss(&mut self, logits: Var, gt: &Tensor, weights: &Arc<Tensor>) -> Result<(Var, SegLossTerms)> {
        let (terms, grad) = losses::seg_loss_with_grad(self.value(logits), gt, weights)?;
        let v = self.push(Tensor::scalar(terms.sum()), Op::SegLoss { logits, grad });
        Ok((v, terms))
    }

    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let mut it = parts.iter();
        let mut acc = *it
            .next()
            .ok_or_else(|| crate::Error::Empty("sum of zero terms".into()))?;
        for &p in it {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Gradients of the scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), 1.0));
        for i in (0..=out.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients(grads)
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = kernels::conv2d_backward(self.value(x), self.value(w), dy, stride, pad);
                acc(grads, x, dx);
                acc(grads, w, dw);
                if let Some(b) = b {
                    acc(grads, b, db);
                }
            }
            &Op::Linear { x, w, b } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let (rows, cols) = xv.rows_cols();
                let out = wv.shape()[0];
                let mut dw = vec![0.0; out * rows];
                kernels::gemm(out, cols, rows, dy.data(), false, xv.data(), true, &mut dw, 0.0);
                let mut dx = vec![0.0; rows * cols];
                kernels::gemm(rows, out, cols, wv.data(), true, dy.data(), false, &mut dx, 0.0);
                acc(grads, w, Tensor::new(wv.shape(), dw).expect("dw"));
                acc(grads, x, Tensor::new(xv.shape(), dx).expect("dx"));
                if let Some(b) = b {
                    let db = (0..out)
                        .map(|o| dy.data()[o * cols..(o + 1) * cols].iter().sum())
                        .collect();
                    acc(grads, b, Tensor::new(&[out], db).expect("db"));
                }
            }
            &Op::Add(a, b) => {
                acc(grads, a, dy.clone());
                acc(grads, b, dy.clone());
            }
            &Op::Scale(a, s) => acc(grads, a, dy.map(|v| v * s)),
            &Op::Gelu(a) => {
                let g = self
                    .value(a)
                    .zip_map(dy, |x, d| kernels::gelu_grad(x) * d)
                    .expect("gelu grad");
                acc(grads, a, g);
            }
            Op::Norm {
                x,
                gamma,
                beta,
                mode,
                xhat,
                rstd,
            } => {
                let (rows, cols) = self.value(*x).rows_cols();
                let gv = self.value(*gamma).data();
                let d = dy.data();
                let mut dgamma = vec![0.0; rows];
                let mut dbeta = vec![0.0; rows];
                let mut dxhat = vec![0.0; rows * cols];
                for r in 0..rows {
                    for j in 0..cols {
                        let i = r * cols + j;
                        dgamma[r] += d[i] * xhat[i];
                        dbeta[r] += d[i];
                        dxhat[i] = d[i] * gv[r];
                    }
                }
                let mut dx = vec![0.0; rows * cols];
                match mode {
                    NormMode::Sample => {
                        let n = (rows * cols) as f64;
                        let m1 = dxhat.iter().sum::<f64>() / n;
                        let m2 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                        for i in 0..rows * cols {
                            dx[i] = rstd[0] * (dxhat[i] - m1 - xhat[i] * m2);
                        }
                    }
                    NormMode::Token => {
                        let n = rows as f64;
                        for j in 0..cols {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for r in 0..rows {
                                let i = r * cols + j;
                                m1 += dxhat[i];
                                m2 += dxhat[i] * xhat[i];
                            }
                            m1 /= n;
                            m2 /= n;
                            for r in 0..rows {
                                let i = r * cols + j;
                                dx[i] = rstd[j] * (dxhat[i] - m1 - xhat[i] * m2);
                            }
                        }
                    }
                }
                acc(grads, *x, Tensor::new(self.value(*x).shape(), dx).expect("norm dx"));
                acc(grads, *gamma, Tensor::new(&[rows], dgamma).expect("dgamma"));
                acc(grads, *beta, Tensor::new(&[rows], dbeta).expect("dbeta"));
            }
            &Op::Resize(x) => {
                let s = self.value(x).shape();
                acc(grads, x, kernels::resize_bilinear_backward(dy, s[1], s[2]));
            }
            Op::CatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).shape()[0];
                    let piece = dy.narrow_rows(off, rows).expect("cat_rows grad");
                    acc(grads, p, piece.reshape(self.value(p).shape()).expect("cat_rows grad"));
                    off += rows;
                }
            }
            Op::CatCols(parts) => {
                let (rows, total) = dy.rows_cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).rows_cols().1;
                    let mut g = vec![0.0; rows * c];
                    for r in 0..rows {
                        g[r * c..(r + 1) * c]
                            .copy_from_slice(&dy.data()[r * total + off..r * total + off + c]);
                    }
                    acc(grads, p, Tensor::new(self.value(p).shape(), g).expect("cat_cols grad"));
                    off += c;
                }
            }
            &Op::NarrowRows { x, start } => {
                let xv = self.value(x);
                let (_, cols) = xv.rows_cols();
                let mut g = vec![0.0; xv.numel()];
                g[start * cols..start * cols + dy.numel()].copy_from_slice(dy.data());
                acc(grads, x, Tensor::new(xv.shape(), g).expect("narrow grad"));
            }
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (ar, ac) = (av.shape()[0], av.shape()[1]);
                let (br, bc) = (bv.shape()[0], bv.shape()[1]);
                let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
                let n = if tb { br } else { bc };
                // Y = op(A) op(B); dop(A) = dY op(B)^T, dop(B) = op(A)^T dY.
                let mut da = vec![0.0; ar * ac];
                if ta {
                    // A^T = dY op(B)^T  =>  A = op(B) dY^T  [k, m]
                    kernels::gemm(k, n, m, bv.data(), tb, dy.data(), true, &mut da, 0.0);
                } else {
                    kernels::gemm(m, n, k, dy.data(), false, bv.data(), !tb, &mut da, 0.0);
                }
                let mut db = vec![0.0; br * bc];
                if tb {
                    // B^T = op(A)^T dY  =>  B = dY^T op(A)  [n, k]
                    kernels::gemm(n, m, k, dy.data(), true, av.data(), ta, &mut db, 0.0);
                } else {
                    kernels::gemm(k, m, n, av.data(), !ta, dy.data(), false, &mut db, 0.0);
                }
                acc(grads, a, Tensor::new(av.shape(), da).expect("matmul da"));
                acc(grads, b, Tensor::new(bv.shape(), db).expect("matmul db"));
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let c = y.shape()[1];
                let mut g = vec![0.0; y.numel()];
                for ((gr, yr), dr) in g
                    .chunks_mut(c.max(1))
                    .zip(y.data().chunks(c.max(1)))
                    .zip(dy.data().chunks(c.max(1)))
                {
                    let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                    for ((gi, &yi), &di) in gr.iter_mut().zip(yr).zip(dr) {
                        *gi = yi * (di - dot);
                    }
                }
                acc(grads, a, Tensor::new(y.shape(), g).expect("softmax grad"));
            }
            &Op::Reshape(a) => {
                let g = dy.clone().reshape(self.value(a).shape()).expect("reshape grad");
                acc(grads, a, g);
            }
            Op::SegLoss { logits, grad } => {
                let s = dy.item();
                acc(grads, *logits, grad.map(|v| v * s));
            }
        }
    }
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
