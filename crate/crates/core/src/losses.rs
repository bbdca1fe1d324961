//! Composite segmentation loss: Dice + weighted IoU + weighted BCE, summed
//! over the three prediction heads.
//!
//! Pixel weights follow the boundary-emphasis scheme common to polyp
//! segmentation: `w = 1 + 5 * |boxmean31(g) - g|`, where the 31x31 box mean
//! uses stride 1, zero padding of 15 and a fixed divisor of 961 (padding
//! counts toward the window).

use serde::{Deserialize, Serialize};

use crate::decoder::PredictionTriple;
use crate::error::{shape_err, Result};
use crate::kernels::{compensated_sum, sigmoid};
use crate::tensor::Tensor;

/// Smoothing term in every ratio denominator.
pub const LOSS_EPS: f64 = 1e-6;
pub const BOUNDARY_WINDOW: usize = 31;
pub const BOUNDARY_GAIN: f64 = 5.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegLossTerms {
    pub dice: f64,
    pub wiou: f64,
    pub wbce: f64,
}

impl SegLossTerms {
    pub fn sum(&self) -> f64 {
        self.dice + self.wiou + self.wbce
    }
}

/// Per-head loss terms and their total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub pred1: SegLossTerms,
    pub pred2: SegLossTerms,
    pub pred3: SegLossTerms,
    pub total: f64,
}

impl LossReport {
    pub fn from_terms(t: [SegLossTerms; 3]) -> Self {
        let total = t[0].sum() + t[1].sum() + t[2].sum();
        Self {
            pred1: t[0],
            pred2: t[1],
            pred3: t[2],
            total,
        }
    }

    /// Element-wise mean of several reports (batch reduction).
    pub fn mean(reports: &[LossReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&LossReport) -> SegLossTerms| {
            let mut acc = SegLossTerms::default();
            for r in reports {
                let t = f(r);
                acc.dice += t.dice / n;
                acc.wiou += t.wiou / n;
                acc.wbce += t.wbce / n;
            }
            acc
        };
        Some(Self::from_terms([avg(|r| r.pred1), avg(|r| r.pred2), avg(|r| r.pred3)]))
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (h, w) = a.dims2()?;
    if b.shape() != [h, w] {
        return shape_err(format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok((h, w))
}

/// Boundary-emphasis weight map `1 + 5 |boxmean31(g) - g|`.
pub fn boundary_weights(g: &Tensor) -> Result<Tensor> {
    let (h, w) = g.dims2()?;
    let r = BOUNDARY_WINDOW / 2;
    // Integral image with a zero border row/column.
    let mut integral = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += g.data()[y * w + x];
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let area = (BOUNDARY_WINDOW * BOUNDARY_WINDOW) as f64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1]
                - integral[y1 * (w + 1) + x0]
                + integral[y0 * (w + 1) + x0];
            let mean = s / area;
            out[y * w + x] = 1.0 + BOUNDARY_GAIN * (mean - g.data()[y * w + x]).abs();
        }
    }
    Tensor::new(&[h, w], out)
}

/// `1 - (2 sum(m g) + eps) / (sum(m) + sum(g) + eps)` on probabilities.
pub fn dice_loss(m: &Tensor, g: &Tensor) -> Result<f64> {
    same_shape(m, g)?;
    let inter: f64 = m.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
    let total = m.sum() + g.sum();
    Ok(1.0 - (2.0 * inter + LOSS_EPS) / (total + LOSS_EPS))
}

/// Weighted IoU loss on probabilities, `1 - (I + eps) / (U - I + eps)` with
/// `I = sum(w m g)` and `U = sum(w (m + g))`.
pub fn weighted_iou_loss(m: &Tensor, g: &Tensor) -> Result<f64> {
    same_shape(m, g)?;
    let w = boundary_weights(g)?;
    Ok(wiou_with_weights(m.data(), g.data(), w.data()).0)
}

/// Weighted binary cross-entropy on logits, normalized by the weight sum.
pub fn weighted_bce_loss(logits: &Tensor, g: &Tensor) -> Result<f64> {
    same_shape(logits, g)?;
    let w = boundary_weights(g)?;
    Ok(wbce_with_weights(logits.data(), g.data(), w.data()))
}

fn wiou_with_weights(m: &[f64], g: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let inter = compensated_sum(m.iter().zip(g).zip(w).map(|((&mi, &gi), &wi)| wi * mi * gi));
    let union = compensated_sum(m.iter().zip(g).zip(w).map(|((&mi, &gi), &wi)| wi * (mi + gi)));
    let num = inter + LOSS_EPS;
    let den = union - inter + LOSS_EPS;
    (1.0 - num / den, num, den)
}

fn bce_logit(z: f64, g: f64) -> f64 {
    z.max(0.0) - z * g + (-z.abs()).exp().ln_1p()
}

fn wbce_with_weights(z: &[f64], g: &[f64], w: &[f64]) -> f64 {
    let wsum = compensated_sum(w.iter().copied());
    let acc = compensated_sum(z.iter().zip(g).zip(w).map(|((&zi, &gi), &wi)| wi * bce_logit(zi, gi)));
    acc / wsum
}

/// Loss terms for one `[H, W]` logit map and the gradient of their sum
/// with respect to the logits.
pub fn seg_loss_with_grad(logits: &Tensor, g: &Tensor, w: &Tensor) -> Result<(SegLossTerms, Tensor)> {
    let (h, wd) = same_shape(logits, g)?;
    if w.shape() != [h, wd] {
        return shape_err(format!("weights {:?} for map {h}x{wd}", w.shape()));
    }
    let z = logits.data();
    let gd = g.data();
    let wv = w.data();
    let m: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();

    let inter = compensated_sum(m.iter().zip(gd).map(|(a, b)| a * b));
    let sum_m = compensated_sum(m.iter().copied());
    let sum_g = compensated_sum(gd.iter().copied());
    let dice_num = 2.0 * inter + LOSS_EPS;
    let dice_den = sum_m + sum_g + LOSS_EPS;
    let dice = 1.0 - dice_num / dice_den;

    let (wiou, iou_num, iou_den) = wiou_with_weights(&m, gd, wv);
    let wbce = wbce_with_weights(z, gd, wv);
    let wsum = compensated_sum(wv.iter().copied());

    let grad: Vec<f64> = (0..z.len())
        .map(|i| {
            let (mi, gi, wi) = (m[i], gd[i], wv[i]);
            let d_dice = -(2.0 * gi * dice_den - dice_num) / (dice_den * dice_den);
            let d_iou = -(wi * gi * iou_den - iou_num * wi * (1.0 - gi)) / (iou_den * iou_den);
            let d_bce = wi * (mi - gi) / wsum;
            (d_dice + d_iou) * mi * (1.0 - mi) + d_bce
        })
        .collect();
    Ok((SegLossTerms { dice, wiou, wbce }, Tensor::new(&[h, wd], grad)?))
}

/// Loss terms for one logit map.
pub fn seg_loss(logits: &Tensor, g: &Tensor) -> Result<SegLossTerms> {
    let w = boundary_weights(g)?;
    Ok(seg_loss_with_grad(logits, g, &w)?.0)
}

/// Sum of the segmentation loss over the three predictions.
pub fn total_loss(preds: &PredictionTriple, g: &Tensor) -> Result<LossReport> {
    let w = boundary_weights(g)?;
    let mut terms = [SegLossTerms::default(); 3];
    for (t, p) in terms.iter_mut().zip(preds.logits()) {
        *t = seg_loss_with_grad(p, g, &w)?.0;
    }
    Ok(LossReport::from_terms(terms))
}
