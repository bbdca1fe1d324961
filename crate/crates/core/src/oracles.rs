//! Slow brute-force references used by tests and the `check` command.
//!
//! Nothing here calls into the modules being checked: resize, convolution,
//! projections, normalization and attention are rewritten as plain loops,
//! and parameters are read by name from the store.

use crate::clip::FrameRole;
use crate::cma::CmaConfig;
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Token-level may-attend matrix over a whole clip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibilityMask {
    pub num_frames: usize,
    pub tokens_per_frame: usize,
    /// Row-major `[T * N, T * N]`, entry `(q, k)` true when `q` may attend to `k`.
    pub allowed: Vec<bool>,
}

impl VisibilityMask {
    /// Built from roles and timestamps only: a reference row sees its own
    /// block, an adjacent row sees references and adjacent frames no later
    /// than itself, the current row sees everything.
    pub fn from_roles(roles: &[FrameRole], timestamps: &[f64], tokens_per_frame: usize, causal: bool) -> Self {
        let t = roles.len();
        let n = tokens_per_frame;
        let mut allowed = vec![false; t * n * t * n];
        for qf in 0..t {
            for kf in 0..t {
                let ok = !causal
                    || match roles[qf] {
                        FrameRole::Reference => qf == kf,
                        FrameRole::Current => true,
                        FrameRole::Adjacent => match roles[kf] {
                            FrameRole::Reference => true,
                            FrameRole::Adjacent => timestamps[kf] <= timestamps[qf],
                            FrameRole::Current => false,
                        },
                    };
                if ok {
                    for i in 0..n {
                        for j in 0..n {
                            allowed[(qf * n + i) * t * n + kf * n + j] = true;
                        }
                    }
                }
            }
        }
        Self {
            num_frames: t,
            tokens_per_frame: n,
            allowed,
        }
    }

    /// Only the diagonal blocks open.
    pub fn block_diagonal(num_frames: usize, tokens_per_frame: usize) -> Self {
        let roles = vec![FrameRole::Reference; num_frames];
        let ts: Vec<f64> = (0..num_frames).map(|i| i as f64).collect();
        Self::from_roles(&roles, &ts, tokens_per_frame, true)
    }

    pub fn size(&self) -> usize {
        self.num_frames * self.tokens_per_frame
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.size() + k]
    }

    pub fn block(&self, qf: usize, kf: usize) -> bool {
        self.get(qf * self.tokens_per_frame, kf * self.tokens_per_frame)
    }

    /// Square, block-constant, diagonal blocks open.
    pub fn check(&self) -> Result<()> {
        let s = self.size();
        if self.allowed.len() != s * s {
            return Err(Error::Mask(format!("mask holds {} entries for {s}x{s}", self.allowed.len())));
        }
        let n = self.tokens_per_frame;
        for q in 0..s {
            for k in 0..s {
                if self.get(q, k) != self.block(q / n, k / n) {
                    return Err(Error::Mask(format!("mask not block-constant at ({q}, {k})")));
                }
            }
        }
        for f in 0..self.num_frames {
            if !self.block(f, f) {
                return Err(Error::Mask(format!("frame {f} cannot attend to itself")));
            }
        }
        Ok(())
    }
}

fn p<'a>(params: &'a ParamStore, name: &str) -> Result<&'a [f64]> {
    Ok(params.get(name)?.data())
}

/// Bilinear sample with half-pixel centres, clamped at the borders.
fn naive_resize(src: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).max(0.0);
                let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).max(0.0);
                let y0 = (sy.floor() as usize).min(h - 1);
                let x0 = (sx.floor() as usize).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let fy = sy - y0 as f64;
                let fx = sx - x0 as f64;
                let at = |y: usize, x: usize| src[(ch * h + y) * w + x];
                out[(ch * oh + oy) * ow + ox] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                    + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
            }
        }
    }
    out
}

fn naive_conv3(src: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias[o];
                for i in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let yy = y as isize + ky as isize - 1;
                            let xx = x as isize + kx as isize - 1;
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            acc += weight[((o * cin + i) * 3 + ky) * 3 + kx]
                                * src[(i * h + yy as usize) * w + xx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + x] = acc;
            }
        }
    }
    out
}

/// Token-major vectors: `tokens[j]` is the j-th column.
type Tokens = Vec<Vec<f64>>;

fn naive_linear(x: &Tokens, weight: &[f64], bias: &[f64]) -> Tokens {
    let inp = x.first().map_or(0, |v| v.len());
    let out = bias.len();
    x.iter()
        .map(|v| {
            (0..out)
                .map(|o| bias[o] + (0..inp).map(|i| weight[o * inp + i] * v[i]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn grid_to_tokens(grid: &[f64], c: usize, n: usize) -> Tokens {
    (0..n).map(|j| (0..c).map(|ch| grid[ch * n + j]).collect()).collect()
}

fn tanh_gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x.powi(3))).tanh())
}

const LN_EPS: f64 = 1e-5;

/// Returns `(token set Z, aligned target feature Fbar)` as token lists.
fn oracle_tokens(pyr: &FeaturePyramid, params: &ParamStore, cfg: &CmaConfig) -> Result<(Tokens, Tokens)> {
    let c = cfg.base_channels;
    let target = &pyr.stages[cfg.target_stage];
    let (hs, ws) = (target.shape()[1], target.shape()[2]);
    let n = hs * ws;
    let sources: Vec<usize> = if cfg.multiscale { (0..4).collect() } else { vec![cfg.target_stage] };
    let mut z: Tokens = vec![Vec::new(); n];
    let mut fbar = Vec::new();
    for u in sources {
        let st = &pyr.stages[u];
        let (cu, h, w) = (st.shape()[0], st.shape()[1], st.shape()[2]);
        let r = naive_resize(st.data(), cu, h, w, hs, ws);
        let pre = format!("cma.align{u}");
        let c3 = naive_conv3(
            &r,
            cu,
            hs,
            ws,
            p(params, &format!("{pre}.conv3.weight"))?,
            p(params, &format!("{pre}.conv3.bias"))?,
            c,
        );
        let a = naive_linear(
            &grid_to_tokens(&c3, c, n),
            p(params, &format!("{pre}.conv1.weight"))?,
            p(params, &format!("{pre}.conv1.bias"))?,
        );
        for (zj, aj) in z.iter_mut().zip(&a) {
            zj.extend_from_slice(aj);
        }
        if u == cfg.target_stage {
            fbar = a;
        }
    }
    Ok((z, fbar))
}

/// Aggregation computed as one dense masked attention over the whole clip.
/// Masked logits are set to `-inf` before the softmax. Returns `[C, Hs, Ws]`
/// per frame.
pub fn masked_dense_attention(
    pyramids: &[FeaturePyramid],
    roles: &[FrameRole],
    mask: &VisibilityMask,
    params: &ParamStore,
    cfg: &CmaConfig,
) -> Result<Vec<Tensor>> {
    mask.check()?;
    let t = pyramids.len();
    if roles.len() != t || mask.num_frames != t {
        return Err(Error::Shape(format!(
            "{t} frames, {} roles, mask over {} frames",
            roles.len(),
            mask.num_frames
        )));
    }
    let target = &pyramids[0].stages[cfg.target_stage];
    let (hs, ws) = (target.shape()[1], target.shape()[2]);
    let n = hs * ws;
    if mask.tokens_per_frame != n {
        return Err(Error::Shape(format!("mask uses {} tokens per frame, clip has {n}", mask.tokens_per_frame)));
    }
    let c = cfg.base_channels;
    let d = cfg.model_dim;
    let heads = cfg.num_heads;
    let dh = d / heads;

    let mut all_z: Tokens = Vec::with_capacity(t * n);
    let mut all_fbar: Tokens = Vec::with_capacity(t * n);
    for pyr in pyramids {
        let (z, fbar) = oracle_tokens(pyr, params, cfg)?;
        all_z.extend(z);
        all_fbar.extend(fbar);
    }
    let k = naive_linear(&all_z, p(params, "cma.k.weight")?, p(params, "cma.k.bias")?);
    let v = naive_linear(&all_z, p(params, "cma.v.weight")?, p(params, "cma.v.bias")?);
    let mut q: Tokens = Vec::with_capacity(t * n);
    for f in 0..t {
        let rows = f * n..(f + 1) * n;
        let qf = match roles[f] {
            FrameRole::Reference => naive_linear(
                &all_z[rows].to_vec(),
                p(params, "cma.q_tokens.weight")?,
                p(params, "cma.q_tokens.bias")?,
            ),
            _ => naive_linear(
                &all_fbar[rows].to_vec(),
                p(params, "cma.q_feature.weight")?,
                p(params, "cma.q_feature.bias")?,
            ),
        };
        q.extend(qf);
    }

    let total = t * n;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attn: Tokens = vec![vec![0.0; d]; total];
    for h in 0..heads {
        let lo = h * dh;
        for qi in 0..total {
            let mut logits = vec![f64::NEG_INFINITY; total];
            for (ki, l) in logits.iter_mut().enumerate() {
                if mask.get(qi, ki) {
                    *l = (lo..lo + dh).map(|e| q[qi][e] * k[ki][e]).sum::<f64>() * scale;
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = ex.iter().sum();
            for e in lo..lo + dh {
                attn[qi][e] = (0..total).map(|ki| ex[ki] / z * v[ki][e]).sum();
            }
        }
    }
    let a = naive_linear(&attn, p(params, "cma.out.weight")?, p(params, "cma.out.bias")?);
    let gamma = p(params, "cma.ln.gamma")?;
    let beta = p(params, "cma.ln.beta")?;
    let mut outputs = Vec::with_capacity(t);
    for f in 0..t {
        let mut grid = vec![0.0; c * n];
        for j in 0..n {
            let i = f * n + j;
            let fhat: Vec<f64> = (0..c).map(|ch| all_fbar[i][ch] + a[i][ch]).collect();
            let mean = fhat.iter().sum::<f64>() / c as f64;
            let var = fhat.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            let ln: Vec<f64> = (0..c)
                .map(|ch| gamma[ch] * (fhat[ch] - mean) / (var + LN_EPS).sqrt() + beta[ch])
                .collect();
            let hidden = naive_linear(&vec![ln], p(params, "cma.ffn1.weight")?, p(params, "cma.ffn1.bias")?);
            let hidden: Tokens = vec![hidden[0].iter().map(|&x| tanh_gelu(x)).collect()];
            let ffn = naive_linear(&hidden, p(params, "cma.ffn2.weight")?, p(params, "cma.ffn2.bias")?);
            for ch in 0..c {
                grid[ch * n + j] = fhat[ch] + ffn[0][ch];
            }
        }
        outputs.push(Tensor::new(&[c, hs, ws], grid)?);
    }
    Ok(outputs)
}

/// Slot contents after a step: `(semantic frame, confidence frame)`.
pub type SlotFrames = (usize, usize);

struct OracleFrame {
    fg: Vec<f64>,
    bg: Vec<f64>,
    prob: Vec<f64>,
}

fn oracle_frame(feature: &Tensor, prob: &Tensor) -> OracleFrame {
    let c = feature.shape()[0];
    let n = prob.numel();
    let pr = prob.data();
    let mut fg = vec![0.0; c];
    let mut bg = vec![0.0; c];
    let sp: f64 = pr.iter().sum();
    let sq: f64 = pr.iter().map(|x| 1.0 - x).sum();
    for ch in 0..c {
        for j in 0..n {
            fg[ch] += pr[j] * feature.data()[ch * n + j];
            bg[ch] += (1.0 - pr[j]) * feature.data()[ch * n + j];
        }
        fg[ch] /= sp + 1e-8;
        bg[ch] /= sq + 1e-8;
    }
    OracleFrame {
        fg,
        bg,
        prob: pr.to_vec(),
    }
}

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-8 || nb < 1e-8 {
        0.0
    } else {
        (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn oracle_sem(f: &OracleFrame, cur: &OracleFrame) -> f64 {
    1.0 - oracle_cos(&f.fg, &f.bg) + oracle_cos(&f.fg, &cur.fg)
}

fn oracle_conf(f: &OracleFrame, cur: &OracleFrame) -> f64 {
    let h = |p: f64| {
        let t = |x: f64| if x > 0.0 { -x * x.log2() } else { 0.0 };
        t(p) + t(1.0 - p)
    };
    let c = 1.0 - f.prob.iter().map(|&p| h(p)).sum::<f64>() / f.prob.len() as f64;
    c + oracle_cos(&f.fg, &cur.fg)
}

/// Slot contents after every step of `stream` (index 0 is the
/// initialization), recomputed for each step by replaying the whole history
/// from scratch.
pub fn dmr_oracle(stream: &[(Tensor, Tensor)], cooldowns: (usize, usize)) -> Vec<SlotFrames> {
    let mut out = Vec::with_capacity(stream.len());
    for end in 0..stream.len() {
        let frames: Vec<OracleFrame> = stream[..=end].iter().map(|(f, p)| oracle_frame(f, p)).collect();
        let (mut sem, mut conf) = (0usize, 0usize);
        let (mut sem_t, mut conf_t) = (0usize, 0usize);
        for t in 1..=end {
            let cand = t - 1;
            let cur = &frames[t];
            if t - sem_t >= cooldowns.0 && oracle_sem(&frames[cand], cur) > oracle_sem(&frames[sem], cur) {
                sem = cand;
                sem_t = t;
            }
            if t - conf_t >= cooldowns.1 && oracle_conf(&frames[cand], cur) > oracle_conf(&frames[conf], cur) {
                conf = cand;
                conf_t = t;
            }
        }
        out.push((sem, conf));
    }
    out
}

/// Central-difference gradient of `f` at `x` for the listed coordinates.
pub fn finite_diff_coords(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    eps: f64,
    coords: &[usize],
) -> Result<Vec<f64>> {
    let mut pt = x.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = pt[i];
        pt[i] = orig + eps;
        let plus = f(&pt);
        pt[i] = orig - eps;
        let minus = f(&pt);
        pt[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("function value at coordinate {i}")));
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Central-difference gradient over every coordinate.
pub fn finite_diff_grad(f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..x.len()).collect();
    finite_diff_coords(f, x, eps, &all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::role_layout;
    use crate::cma::{cma_forward, init_cma};
    use crate::rng::SeededRng;
    use FrameRole::*;

    #[test]
    fn fd_square_and_linear() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        for eps in [1e-2, 1e-4] {
            let g = finite_diff_grad(|x| 2.0 * x[0] - 0.5 * x[1], &[1.0, 7.0], eps).unwrap();
            assert!((g[0] - 2.0).abs() < 1e-9 && (g[1] + 0.5).abs() < 1e-9);
        }
        assert!(finite_diff_grad(|x| x[0].ln(), &[0.0], 1e-3).is_err());
    }

    #[test]
    fn mask_structure() {
        let roles = role_layout(6, 2);
        let ts: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let m = VisibilityMask::from_roles(&roles, &ts, 3, true);
        m.check().unwrap();
        // references see only themselves
        assert!(m.block(0, 0) && !m.block(0, 1) && !m.block(1, 0));
        // adjacent rows see every reference and earlier adjacent frames only
        for q in 2..5 {
            for k in 0..6 {
                assert_eq!(m.block(q, k), k <= q, "{q} {k}");
            }
        }
        assert!((0..6).all(|k| m.block(5, k)));
        let mut bad = m.clone();
        bad.allowed[1] = false;
        assert!(bad.check().is_err());
    }

    fn random_pyr(rng: &mut SeededRng, c: usize) -> FeaturePyramid {
        FeaturePyramid {
            stages: std::array::from_fn(|k| {
                let ch = c << (k + 1);
                let s = 16 >> k;
                Tensor::from_fn(&[ch, s, s], |_| rng.normal())
            }),
            base_channels: c,
        }
    }

    #[test]
    fn single_frame_is_self_attention() {
        let cfg = CmaConfig::new(4, 2);
        let params = init_cma(5, &cfg).unwrap();
        let mut rng = SeededRng::new(9);
        let pyr = vec![random_pyr(&mut rng, 4)];
        let roles = vec![Current];
        let dense = masked_dense_attention(&pyr, &roles, &VisibilityMask::block_diagonal(1, 4), &params, &cfg).unwrap();
        assert_eq!(dense.len(), 1);
        // identical to a clip of two copies where each attends only to itself
        let pyr2 = vec![pyr[0].clone(), pyr[0].clone()];
        let dense2 =
            masked_dense_attention(&pyr2, &[Current, Current], &VisibilityMask::block_diagonal(2, 4), &params, &cfg)
                .unwrap();
        assert!(dense[0].max_abs_diff(&dense2[0]) < 1e-12);
        assert!(dense[0].max_abs_diff(&dense2[1]) < 1e-12);
    }

    #[test]
    fn block_diagonal_mask_isolates_frames() {
        let cfg = CmaConfig::new(4, 2);
        let params = init_cma(6, &cfg).unwrap();
        let mut rng = SeededRng::new(10);
        let pyrs: Vec<_> = (0..3).map(|_| random_pyr(&mut rng, 4)).collect();
        let roles = vec![Adjacent, Adjacent, Current];
        let mask = VisibilityMask::block_diagonal(3, 4);
        let a = masked_dense_attention(&pyrs, &roles, &mask, &params, &cfg).unwrap();
        let mut changed = pyrs.clone();
        changed[0] = random_pyr(&mut rng, 4);
        let b = masked_dense_attention(&changed, &roles, &mask, &params, &cfg).unwrap();
        assert_eq!(a[1], b[1]);
        assert_eq!(a[2], b[2]);
    }

    #[test]
    fn dense_matches_per_frame_forward() {
        let mut cfg = CmaConfig::new(4, 2);
        for (multiscale, causal) in [(true, true), (false, true), (true, false)] {
            cfg.multiscale = multiscale;
            cfg.causal = causal;
            let params = init_cma(7, &cfg).unwrap();
            let mut rng = SeededRng::new(11);
            let pyrs: Vec<_> = (0..6).map(|_| random_pyr(&mut rng, 4)).collect();
            let roles = role_layout(6, 2);
            let ts: Vec<f64> = (0..6).map(|i| i as f64).collect();
            let mask = VisibilityMask::from_roles(&roles, &ts, 4, causal);
            let dense = masked_dense_attention(&pyrs, &roles, &mask, &params, &cfg).unwrap();
            let fast = cma_forward(&pyrs, &roles, &params, &cfg).unwrap();
            for (a, b) in dense.iter().zip(&fast) {
                assert!(a.max_abs_diff(b) < 1e-9);
            }
        }
    }

    fn const_stream(n: usize) -> Vec<(Tensor, Tensor)> {
        let f = Tensor::from_fn(&[3, 2, 2], |i| i as f64 * 0.1 - 0.3);
        let p = Tensor::new(&[2, 2], vec![0.9, 0.2, 0.7, 0.1]).unwrap();
        vec![(f, p); n]
    }

    #[test]
    fn constant_stream_never_updates() {
        let s = dmr_oracle(&const_stream(12), (5, 1));
        assert!(s.iter().all(|&f| f == (0, 0)));
    }

    #[test]
    fn dominant_frame_taken_at_first_legal_step() {
        // frames share a foreground direction; frame 7 has the clearest
        // separation and a binary probability map
        let mut stream = Vec::new();
        for t in 0..16 {
            let (bg, p) = if t == 7 { (-1.0, 1.0) } else { (0.5, 0.6) };
            let f = Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 1.0, bg]).unwrap();
            let prob = Tensor::new(&[1, 2], vec![p, 0.0]).unwrap();
            stream.push((f, prob));
        }
        let s = dmr_oracle(&stream, (5, 1));
        // candidate 7 is evaluated at step 8; semantic cooldown from t=0 has passed
        assert_eq!(s[7].0, 0);
        assert_eq!(s[8].0, 7);
        assert_eq!(s[8].1, 7);
        assert_eq!(s[15], (7, 7));
    }
}
