//! Segmentation metrics: Dice, IoU, MAE, S-measure, E-measure, weighted F.
//!
//! Dice and IoU use the prediction binarized at 0.5. The structural
//! measures follow their usual published definitions with alpha = 0.5 for
//! S, a 256-threshold mean for E and beta^2 = 1 for weighted F.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BINARIZE_THRESHOLD: f64 = 0.5;
pub const S_ALPHA: f64 = 0.5;
pub const E_THRESHOLDS: usize = 256;
pub const F_BETA2: f64 = 1.0;
const EPS: f64 = f64::EPSILON;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub iou: f64,
    pub mae: f64,
    pub s_measure: f64,
    pub e_measure_mean: f64,
    pub weighted_f: f64,
}

impl MetricReport {
    const FIELDS: usize = 6;

    fn to_array(self) -> [f64; Self::FIELDS] {
        [
            self.dice,
            self.iou,
            self.mae,
            self.s_measure,
            self.e_measure_mean,
            self.weighted_f,
        ]
    }

    fn from_array(a: [f64; Self::FIELDS]) -> Self {
        Self {
            dice: a[0],
            iou: a[1],
            mae: a[2],
            s_measure: a[3],
            e_measure_mean: a[4],
            weighted_f: a[5],
        }
    }

    /// Unweighted mean. Values are summed in sorted order so the result does
    /// not depend on the order of `reports`.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::Empty("no reports to average".into()));
        }
        let mut out = [0.0; Self::FIELDS];
        for (i, o) in out.iter_mut().enumerate() {
            let mut v: Vec<f64> = reports.iter().map(|r| r.to_array()[i]).collect();
            v.sort_by(f64::total_cmp);
            *o = v.iter().sum::<f64>() / v.len() as f64;
        }
        Ok(Self::from_array(out))
    }

    pub fn in_range(&self) -> bool {
        self.to_array().iter().all(|v| (0.0..=1.0).contains(v))
    }
}

fn check_pair(pred: &Tensor, g: &Tensor) -> Result<(usize, usize)> {
    let (h, w) = g.dims2()?;
    if pred.shape() != g.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            g.shape()
        )));
    }
    if !pred.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::Value("prediction outside [0, 1]".into()));
    }
    if !g.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        return Err(Error::Value("ground truth must be binary".into()));
    }
    Ok((h, w))
}

fn counts(pred: &Tensor, g: &Tensor) -> (f64, f64, f64) {
    let (mut inter, mut np, mut ng) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.data().iter().zip(g.data()) {
        let b = p >= BINARIZE_THRESHOLD;
        let t = t > 0.5;
        inter += (b && t) as u8 as f64;
        np += b as u8 as f64;
        ng += t as u8 as f64;
    }
    (inter, np, ng)
}

pub fn dice(pred: &Tensor, g: &Tensor) -> Result<f64> {
    check_pair(pred, g)?;
    let (i, p, t) = counts(pred, g);
    Ok(if p + t == 0.0 { 1.0 } else { 2.0 * i / (p + t) })
}

pub fn iou(pred: &Tensor, g: &Tensor) -> Result<f64> {
    check_pair(pred, g)?;
    let (i, p, t) = counts(pred, g);
    let u = p + t - i;
    Ok(if u == 0.0 { 1.0 } else { i / u })
}

pub fn mae(pred: &Tensor, g: &Tensor) -> Result<f64> {
    check_pair(pred, g)?;
    Ok(pred
        .data()
        .iter()
        .zip(g.data())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.numel() as f64)
}

// ---------- S-measure ----------

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let x = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + var.sqrt() + EPS)
}

fn region_ssim(pred: &[f64], g: &[f64]) -> f64 {
    let n = pred.len() as f64;
    if pred.is_empty() {
        return 0.0;
    }
    let x = pred.iter().sum::<f64>() / n;
    let y = g.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(g) {
        sxx += (p - x) * (p - x);
        syy += (t - y) * (t - y);
        sxy += (p - x) * (t - y);
    }
    let d = n - 1.0 + EPS;
    let (sxx, syy, sxy) = (sxx / d, syy / d, sxy / d);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn block(t: &Tensor, w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for y in rows {
        out.extend_from_slice(&t.data()[y * w + cols.start..y * w + cols.end]);
    }
    out
}

/// Column/row split point from the foreground centroid: the number of
/// columns (rows) in the left (top) part.
fn centroid(g: &Tensor, h: usize, w: usize) -> (usize, usize) {
    let total: f64 = g.sum();
    if total == 0.0 {
        return ((w as f64 / 2.0).round() as usize, (h as f64 / 2.0).round() as usize);
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = g.data()[y * w + x];
            sx += v * x as f64;
            sy += v * y as f64;
        }
    }
    let cx = (sx / total).round() as usize + 1;
    let cy = (sy / total).round() as usize + 1;
    (cx.min(w), cy.min(h))
}

fn s_object(pred: &Tensor, g: &Tensor) -> f64 {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (&p, &t) in pred.data().iter().zip(g.data()) {
        if t > 0.5 {
            fg.push(p);
        } else {
            bg.push(1.0 - p);
        }
    }
    let u = g.mean();
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

fn s_region(pred: &Tensor, g: &Tensor, h: usize, w: usize) -> f64 {
    let (x, y) = centroid(g, h, w);
    let area = (h * w) as f64;
    let parts = [(0..y, 0..x), (0..y, x..w), (y..h, 0..x), (y..h, x..w)];
    let mut total = 0.0;
    for (rows, cols) in parts {
        let weight = (rows.len() * cols.len()) as f64 / area;
        if weight == 0.0 {
            continue;
        }
        let p = block(pred, w, rows.clone(), cols.clone());
        let t = block(g, w, rows, cols);
        total += weight * region_ssim(&p, &t);
    }
    total
}

pub fn s_measure(pred: &Tensor, g: &Tensor) -> Result<f64> {
    let (h, w) = check_pair(pred, g)?;
    let y = g.mean();
    Ok(if y == 0.0 {
        1.0 - pred.mean()
    } else if y == 1.0 {
        pred.mean()
    } else {
        let q = S_ALPHA * s_object(pred, g) + (1.0 - S_ALPHA) * s_region(pred, g, h, w);
        q.max(0.0)
    })
}

// ---------- E-measure ----------

fn enhanced_alignment(fm: &[f64], g: &Tensor) -> f64 {
    let n = fm.len() as f64;
    let sg = g.sum();
    let sum = if sg == 0.0 {
        fm.iter().map(|v| 1.0 - v).sum::<f64>()
    } else if sg == n {
        fm.iter().sum::<f64>()
    } else {
        let mu_fm = fm.iter().sum::<f64>() / n;
        let mu_gt = sg / n;
        fm.iter()
            .zip(g.data())
            .map(|(f, t)| {
                let a = f - mu_fm;
                let b = t - mu_gt;
                let align = 2.0 * a * b / (a * a + b * b + EPS);
                (align + 1.0) * (align + 1.0) / 4.0
            })
            .sum::<f64>()
    };
    sum / n
}

/// Mean enhanced-alignment score over thresholds `k / 256`, `k = 0..255`,
/// with the prediction binarized as `pred > threshold`.
pub fn e_measure_mean(pred: &Tensor, g: &Tensor) -> Result<f64> {
    check_pair(pred, g)?;
    let mut fm = vec![0.0; pred.numel()];
    let mut total = 0.0;
    for k in 0..E_THRESHOLDS {
        let th = k as f64 / E_THRESHOLDS as f64;
        for (f, &p) in fm.iter_mut().zip(pred.data()) {
            *f = if p > th { 1.0 } else { 0.0 };
        }
        total += enhanced_alignment(&fm, g);
    }
    Ok(total / E_THRESHOLDS as f64)
}

// ---------- weighted F-measure ----------

/// 1-D squared distance transform (lower envelope of parabolas) with the
/// index of the minimizing site.
fn dt_1d(f: &[f64], arg: &[usize], d: &mut [f64], out_arg: &mut [usize]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let first = match (0..n).find(|&i| f[i].is_finite()) {
        Some(i) => i,
        None => {
            d.fill(f64::INFINITY);
            out_arg.copy_from_slice(arg);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        d[q] = dq * dq + f[p];
        out_arg[q] = arg[p];
    }
}

/// Exact Euclidean distance from every pixel to the nearest foreground
/// pixel, with the flat index of that pixel. Requires a non-empty mask.
pub fn distance_transform(g: &Tensor) -> Result<(Vec<f64>, Vec<usize>)> {
    let (h, w) = g.dims2()?;
    if g.sum() == 0.0 {
        return Err(Error::Empty("distance transform of an empty mask".into()));
    }
    // columns first: for each pixel, nearest foreground row in its column
    let mut col_d = vec![0.0; h * w];
    let mut col_arg = vec![0usize; h * w];
    let mut f = vec![0.0; h];
    let mut arg = vec![0usize; h];
    let mut d = vec![0.0; h];
    let mut a = vec![0usize; h];
    for x in 0..w {
        for y in 0..h {
            f[y] = if g.data()[y * w + x] > 0.5 { 0.0 } else { f64::INFINITY };
            arg[y] = y * w + x;
        }
        dt_1d(&f, &arg, &mut d, &mut a);
        for y in 0..h {
            col_d[y * w + x] = d[y];
            col_arg[y * w + x] = a[y];
        }
    }
    let mut dist = vec![0.0; h * w];
    let mut idx = vec![0usize; h * w];
    let mut d = vec![0.0; w];
    let mut a = vec![0usize; w];
    for y in 0..h {
        let row = y * w..(y + 1) * w;
        dt_1d(&col_d[row.clone()], &col_arg[row.clone()], &mut d, &mut a);
        for x in 0..w {
            dist[y * w + x] = d[x].sqrt();
            idx[y * w + x] = a[x];
        }
    }
    Ok((dist, idx))
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut k = Vec::with_capacity(size * size);
    for y in -r..=r {
        for x in -r..=r {
            k.push((-((x * x + y * y) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = k.iter().sum();
    k.iter().map(|v| v / s).collect()
}

fn filter_zero_pad(img: &[f64], h: usize, w: usize, k: &[f64], size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for ky in -r..=r {
                let yy = y + ky;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in -r..=r {
                    let xx = x + kx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    acc += k[((ky + r) as usize) * size + (kx + r) as usize]
                        * img[yy as usize * w + xx as usize];
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

/// Weighted F-measure. An empty ground truth scores `1 - mean(pred)`.
pub fn weighted_f(pred: &Tensor, g: &Tensor) -> Result<f64> {
    let (h, w) = check_pair(pred, g)?;
    if g.sum() == 0.0 {
        return Ok(1.0 - pred.mean());
    }
    let gt: Vec<bool> = g.data().iter().map(|&v| v > 0.5).collect();
    let e: Vec<f64> = pred.data().iter().zip(g.data()).map(|(p, t)| (p - t).abs()).collect();
    let (dist, idx) = distance_transform(g)?;
    let et: Vec<f64> = (0..h * w).map(|i| if gt[i] { e[i] } else { e[idx[i]] }).collect();
    let kernel = gaussian_kernel(7, 5.0);
    let ea = filter_zero_pad(&et, h, w, &kernel, 7);
    let mut ew = vec![0.0; h * w];
    for i in 0..h * w {
        let min_e = if gt[i] && ea[i] < e[i] { ea[i] } else { e[i] };
        let b = if gt[i] {
            1.0
        } else {
            2.0 - ((0.5f64).ln() / 5.0 * dist[i]).exp()
        };
        ew[i] = min_e * b;
    }
    let n_gt = gt.iter().filter(|&&v| v).count() as f64;
    let ew_fg: f64 = (0..h * w).filter(|&i| gt[i]).map(|i| ew[i]).sum();
    let ew_bg: f64 = (0..h * w).filter(|&i| !gt[i]).map(|i| ew[i]).sum();
    let tpw = n_gt - ew_fg;
    let fpw = ew_bg;
    let r = 1.0 - ew_fg / n_gt;
    let p = tpw / (EPS + tpw + fpw);
    Ok(((1.0 + F_BETA2) * r * p / (EPS + r + F_BETA2 * p)).clamp(0.0, 1.0))
}

pub fn frame_metrics(pred: &Tensor, g: &Tensor) -> Result<MetricReport> {
    Ok(MetricReport {
        dice: dice(pred, g)?,
        iou: iou(pred, g)?,
        mae: mae(pred, g)?,
        s_measure: s_measure(pred, g)?,
        e_measure_mean: e_measure_mean(pred, g)?,
        weighted_f: weighted_f(pred, g)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub metrics: MetricReport,
    pub num_clips: usize,
    pub num_frames: usize,
}

/// Frame scores are averaged within each clip, then clip scores across
/// clips.
pub fn evaluate_dataset<C, F>(clips: C) -> Result<DatasetReport>
where
    C: IntoIterator<Item = F>,
    F: IntoIterator<Item = (Tensor, Tensor)>,
{
    let mut clip_reports = Vec::new();
    let mut num_frames = 0;
    for clip in clips {
        let frames = clip
            .into_iter()
            .map(|(p, g)| frame_metrics(&p, &g))
            .collect::<Result<Vec<_>>>()?;
        num_frames += frames.len();
        clip_reports.push(MetricReport::mean(&frames)?);
    }
    Ok(DatasetReport {
        metrics: MetricReport::mean(&clip_reports)?,
        num_clips: clip_reports.len(),
        num_frames,
    })
}

/// Aligned text table, one row per named report.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(4);
    let heads = ["S_alpha", "E_phi_mn", "F_beta_w", "Dice", "IoU", "MAE"];
    let mut s = format!("{:<name_w$}", "name");
    for h in heads {
        s.push_str(&format!("  {h:>8}"));
    }
    s.push('\n');
    for (name, r) in rows {
        s.push_str(&format!("{name:<name_w$}"));
        for v in [r.s_measure, r.e_measure_mean, r.weighted_f, r.dice, r.iou, r.mae] {
            s.push_str(&format!("  {v:>8.4}"));
        }
        s.push('\n');
    }
    s
}
