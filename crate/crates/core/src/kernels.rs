//! Numerical kernels shared by the differentiable graph and the plain
//! tensor APIs: GEMM, convolution via im2col, bilinear resize, GELU and
//! normalization.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// `c = op(a) * op(b) + beta * c` with row-major storage.
///
/// `op(a)` is `[m, k]`; when `ta` is set `a` is stored as `[k, m]`.
/// `op(b)` is `[k, n]`; when `tb` is set `b` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; strides describe in-bounds views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let kk = g.k * g.k;
    let mut cols = vec![0.0; g.cin * kk * ho * wo];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * kk + ky * g.k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = (ci * g.h + iy as usize) * g.w;
                    let dst = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            cols[dst + ox] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let kk = g.k * g.k;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * kk + ky * g.k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = (ci * g.h + iy as usize) * g.w;
                    let src = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[dst + ix as usize] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D convolution of a `[Cin, H, W]` grid with `[Cout, Cin, k, k]` weights.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (cin, h, wd) = x.dims3()?;
    let (cout, k) = match w.shape() {
        &[co, ci, k1, k2] if ci == cin && k1 == k2 => (co, k1),
        s => return shape_err(format!("conv weight {s:?} for input {:?}", x.shape())),
    };
    if let Some(b) = b {
        if b.shape() != [cout] {
            return shape_err(format!("conv bias {:?}, expected [{cout}]", b.shape()));
        }
    }
    if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
        return shape_err(format!("conv {k}x{k}/{stride} does not fit {h}x{wd}"));
    }
    let g = ConvGeom {
        cin,
        h,
        w: wd,
        k,
        stride,
        pad,
    };
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let mut out = vec![0.0; cout * n];
    if let Some(b) = b {
        for (co, &bv) in b.data().iter().enumerate() {
            out[co * n..(co + 1) * n].fill(bv);
        }
    }
    let kdim = cin * k * k;
    if g.is_pointwise() {
        gemm(cout, kdim, n, w.data(), false, x.data(), false, &mut out, 1.0);
    } else {
        let cols = im2col(x.data(), &g);
        gemm(cout, kdim, n, w.data(), false, &cols, false, &mut out, 1.0);
    }
    Tensor::new(&[cout, ho, wo], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let g = ConvGeom {
        cin,
        h,
        w: wd,
        k,
        stride,
        pad,
    };
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let kdim = cin * k * k;
    let mut db = vec![0.0; cout];
    for (co, v) in db.iter_mut().enumerate() {
        *v = dout.data()[co * n..(co + 1) * n].iter().sum();
    }
    let mut dw = vec![0.0; cout * kdim];
    let dx;
    if g.is_pointwise() {
        gemm(cout, n, kdim, dout.data(), false, x.data(), true, &mut dw, 0.0);
        let mut d = vec![0.0; kdim * n];
        gemm(kdim, cout, n, w.data(), true, dout.data(), false, &mut d, 0.0);
        dx = d;
    } else {
        let cols = im2col(x.data(), &g);
        gemm(cout, n, kdim, dout.data(), false, &cols, true, &mut dw, 0.0);
        let mut dcols = vec![0.0; kdim * n];
        gemm(kdim, cout, n, w.data(), true, dout.data(), false, &mut dcols, 0.0);
        dx = col2im(&dcols, &g);
    }
    (
        Tensor::new(x.shape(), dx).expect("conv dx shape"),
        Tensor::new(w.shape(), dw).expect("conv dw shape"),
        Tensor::new(&[cout], db).expect("conv db shape"),
    )
}

/// Per-axis taps for bilinear resampling with half-pixel centres
/// (`align_corners = false`): destination index `i` samples source
/// coordinate `(i + 0.5) * in / out - 0.5`, clamped below at zero, and
/// blends the two neighbouring source samples (the upper one clamped to
/// the last index).
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_lo: Vec<f64>,
    pub w_hi: Vec<f64>,
}

impl AxisTaps {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let mut taps = AxisTaps {
            lo: Vec::with_capacity(n_out),
            hi: Vec::with_capacity(n_out),
            w_lo: Vec::with_capacity(n_out),
            w_hi: Vec::with_capacity(n_out),
        };
        for i in 0..n_out {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            let frac = src - lo as f64;
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.w_lo.push(1.0 - frac);
            taps.w_hi.push(frac);
        }
        taps
    }
}

/// Bilinear resize of a `[C, H, W]` grid to `[C, oh, ow]`.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if h == 0 || w == 0 || oh == 0 || ow == 0 {
        return shape_err(format!("resize {h}x{w} -> {oh}x{ow}"));
    }
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let ty = AxisTaps::new(h, oh);
    let tx = AxisTaps::new(w, ow);
    let src = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            let r0 = base + ty.lo[oy] * w;
            let r1 = base + ty.hi[oy] * w;
            let (a0, a1) = (ty.w_lo[oy], ty.w_hi[oy]);
            let o = (ch * oh + oy) * ow;
            for ox in 0..ow {
                let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
                let (b0, b1) = (tx.w_lo[ox], tx.w_hi[ox]);
                out[o + ox] = a0 * (b0 * src[r0 + x0] + b1 * src[r0 + x1])
                    + a1 * (b0 * src[r1 + x0] + b1 * src[r1 + x1]);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Adjoint of [`resize_bilinear`]: scatters `dout` back onto an `[C, h, w]` grid.
pub(crate) fn resize_bilinear_backward(dout: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, oh, ow) = (dout.shape()[0], dout.shape()[1], dout.shape()[2]);
    if (h, w) == (oh, ow) {
        return dout.clone();
    }
    let ty = AxisTaps::new(h, oh);
    let tx = AxisTaps::new(w, ow);
    let d = dout.data();
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            let r0 = base + ty.lo[oy] * w;
            let r1 = base + ty.hi[oy] * w;
            let (a0, a1) = (ty.w_lo[oy], ty.w_hi[oy]);
            let o = (ch * oh + oy) * ow;
            for ox in 0..ow {
                let g = d[o + ox];
                let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
                let (b0, b1) = (tx.w_lo[ox], tx.w_hi[ox]);
                dx[r0 + x0] += a0 * b0 * g;
                dx[r0 + x1] += a0 * b1 * g;
                dx[r1 + x0] += a1 * b0 * g;
                dx[r1 + x1] += a1 * b1 * g;
            }
        }
    }
    Tensor::new(&[c, h, w], dx).expect("resize adjoint shape")
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Neumaier-compensated sum. Loss reductions run over tens of thousands of
/// pixels, where plain accumulation error swamps finite-difference checks.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = s + v;
        c += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
        s = t;
    }
    s + c
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Which elements share normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// One mean/variance over the whole `[C, ...]` sample.
    Sample,
    /// One mean/variance per column (token) across the leading dimension.
    Token,
}

/// Normalized values `xhat` and per-group reciprocal std.
pub(crate) fn normalize(x: &Tensor, mode: NormMode) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = x.rows_cols();
    let d = x.data();
    match mode {
        NormMode::Sample => {
            let n = d.len() as f64;
            let mean = compensated_sum(d.iter().copied()) / n;
            let var = compensated_sum(d.iter().map(|v| (v - mean) * (v - mean))) / n;
            let rstd = 1.0 / (var + NORM_EPS).sqrt();
            (d.iter().map(|v| (v - mean) * rstd).collect(), vec![rstd])
        }
        NormMode::Token => {
            let mut xhat = vec![0.0; d.len()];
            let mut rstds = Vec::with_capacity(cols);
            for j in 0..cols {
                let mean = (0..rows).map(|r| d[r * cols + j]).sum::<f64>() / rows as f64;
                let var = (0..rows)
                    .map(|r| (d[r * cols + j] - mean).powi(2))
                    .sum::<f64>()
                    / rows as f64;
                let rstd = 1.0 / (var + NORM_EPS).sqrt();
                for r in 0..rows {
                    xhat[r * cols + j] = (d[r * cols + j] - mean) * rstd;
                }
                rstds.push(rstd);
            }
            (xhat, rstds)
        }
    }
}

/// Normalization followed by a per-channel affine map.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, mode: NormMode) -> Result<Tensor> {
    let (rows, cols) = x.rows_cols();
    if gamma.shape() != [rows] || beta.shape() != [rows] {
        return shape_err(format!(
            "norm affine {:?}/{:?} for {:?}",
            gamma.shape(),
            beta.shape(),
            x.shape()
        ));
    }
    let (xhat, _) = normalize(x, mode);
    let mut out = xhat;
    for r in 0..rows {
        let (g, b) = (gamma.data()[r], beta.data()[r]);
        for v in &mut out[r * cols..(r + 1) * cols] {
            *v = g * *v + b;
        }
    }
    Tensor::new(x.shape(), out)
}
