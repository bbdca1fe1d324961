//! Causal multi-scale aggregation.
//!
//! Every pyramid stage `u` of a frame is resized to the target stage's grid,
//! passed through a 3x3 then a 1x1 convolution to `C` channels, and the
//! aligned maps are stacked channel-wise (ascending `u`) into the frame's
//! token set `Z` of `S * C` channels. Attention tokens are spatial
//! positions; frames are concatenated along the token axis.
//!
//! Queries depend on the frame role: reference frames project their own
//! token set, adjacent and current frames project their aligned
//! target-stage feature `Fbar` (two separate query projections, since the
//! inputs have `S * C` and `C` channels). Keys and values always come from
//! token sets of the visible frames:
//!
//! * reference `r`: only itself
//! * adjacent `t`: every reference plus adjacent frames up to and including `t`
//! * current: every frame
//!
//! The attended output `A` is projected back to `C` channels and fused as
//! `Fhat = Fbar + A`, `Ftilde = Fhat + FFN(LN(Fhat))`, with LN over channels
//! per token and a `C -> 4C -> C` GELU feed-forward. Multi-head attention
//! projects first and then splits heads; logits are scaled by
//! `1/sqrt(d / heads)`.

use serde::{Deserialize, Serialize};

use crate::clip::{validate_roles, FrameRole};
use crate::encoder::{FeaturePyramid, NUM_STAGES};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::NormMode;
use crate::params::{Bound, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CmaConfig {
    /// Unified channel width `C`.
    pub base_channels: usize,
    pub target_stage: usize,
    pub num_heads: usize,
    /// Attention width `d`.
    pub model_dim: usize,
    pub ffn_ratio: usize,
    /// Use every pyramid stage as a token source (otherwise only the target stage).
    pub multiscale: bool,
    /// Restrict keys/values to reference and past frames (otherwise every frame).
    pub causal: bool,
}

impl CmaConfig {
    pub fn new(base_channels: usize, num_heads: usize) -> Self {
        Self {
            base_channels,
            target_stage: 3,
            num_heads,
            model_dim: base_channels,
            ffn_ratio: 4,
            multiscale: true,
            causal: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.num_heads == 0 || self.model_dim == 0 {
            return Err(Error::InvalidConfig("zero CMA width or head count".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.num_heads
            )));
        }
        if self.target_stage >= NUM_STAGES {
            return Err(Error::InvalidConfig(format!(
                "target stage {} out of range 0..{NUM_STAGES}",
                self.target_stage
            )));
        }
        Ok(())
    }

    /// Source stages contributing to each token set, ascending.
    pub fn sources(&self) -> Vec<usize> {
        if self.multiscale {
            (0..NUM_STAGES).collect()
        } else {
            vec![self.target_stage]
        }
    }

    pub fn token_channels(&self) -> usize {
        self.sources().len() * self.base_channels
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// A frame's multi-scale token set.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    /// `[S * C, Hs, Ws]`.
    pub grid: Tensor,
    pub frame_index: usize,
    pub role: FrameRole,
}

impl TokenSet {
    /// `[S * C, Hs * Ws]`, one column per token.
    pub fn tokens(&self) -> Tensor {
        let (c, h, w) = self.grid.dims3().expect("token grid is rank 3");
        self.grid.clone().reshape(&[c, h * w]).expect("token reshape")
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.shape()[1] * self.grid.shape()[2]
    }
}

pub fn init_cma(seed: u64, cfg: &CmaConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let c = cfg.base_channels;
    let d = cfg.model_dim;
    let zc = cfg.token_channels();
    let hidden = cfg.ffn_ratio * c;
    let mut rng = SeededRng::derived(seed, 0xC3A);
    let mut p = ParamStore::new();
    for u in cfg.sources() {
        let cu = c << (u + 1);
        p.init_weight(&mut rng, &format!("cma.align{u}.conv3.weight"), &[c, cu, 3, 3], cu * 9);
        p.init_const(&format!("cma.align{u}.conv3.bias"), &[c], 0.0);
        p.init_weight(&mut rng, &format!("cma.align{u}.conv1.weight"), &[c, c], c);
        p.init_const(&format!("cma.align{u}.conv1.bias"), &[c], 0.0);
    }
    for (name, out, inp) in [
        ("q_tokens", d, zc),
        ("q_feature", d, c),
        ("k", d, zc),
        ("v", d, zc),
        ("out", c, d),
        ("ffn1", hidden, c),
        ("ffn2", c, hidden),
    ] {
        p.init_weight(&mut rng, &format!("cma.{name}.weight"), &[out, inp], inp);
        p.init_const(&format!("cma.{name}.bias"), &[out], 0.0);
    }
    p.init_const("cma.ln.gamma", &[c], 1.0);
    p.init_const("cma.ln.beta", &[c], 0.0);
    Ok(p)
}

/// Frames whose token sets form the keys/values for frame `t`.
pub fn visible_frames(roles: &[FrameRole], t: usize, causal: bool) -> Result<Vec<usize>> {
    validate_roles(roles)?;
    if t >= roles.len() {
        return Err(Error::Shape(format!("frame {t} outside clip of {}", roles.len())));
    }
    if !causal {
        return Ok((0..roles.len()).collect());
    }
    Ok(match roles[t] {
        FrameRole::Reference => vec![t],
        FrameRole::Adjacent | FrameRole::Current => (0..=t).collect(),
    })
}

fn linear_named(g: &mut Graph, p: &Bound, x: Var, name: &str) -> Result<Var> {
    g.linear(x, p.var(&format!("{name}.weight"))?, Some(p.var(&format!("{name}.bias"))?))
}

/// Resize stage `u` to `(hs, ws)`, then 3x3 conv and 1x1 conv to `C` channels.
pub fn align_feature_graph(g: &mut Graph, p: &Bound, f_u: Var, u: usize, hs: usize, ws: usize) -> Result<Var> {
    let r = g.resize(f_u, hs, ws)?;
    let pre = format!("cma.align{u}");
    let c3 = g.conv2d(
        r,
        p.var(&format!("{pre}.conv3.weight"))?,
        Some(p.var(&format!("{pre}.conv3.bias"))?),
        1,
        1,
    )?;
    linear_named(g, p, c3, &format!("{pre}.conv1"))
}

/// Graph handles for one frame's token set and aligned target feature.
#[derive(Clone, Copy, Debug)]
pub struct FrameTokens {
    /// `[S * C, Hs, Ws]`.
    pub z: Var,
    /// `[C, Hs, Ws]`.
    pub fbar: Var,
}

pub fn token_set_graph(g: &mut Graph, p: &Bound, cfg: &CmaConfig, stages: &[Var; NUM_STAGES]) -> Result<FrameTokens> {
    let ts = g.shape(stages[cfg.target_stage]).to_vec();
    if ts.len() != 3 {
        return Err(Error::Shape(format!("target stage grid {ts:?}")));
    }
    let (hs, ws) = (ts[1], ts[2]);
    let mut aligned = Vec::new();
    let mut fbar = None;
    for u in cfg.sources() {
        let a = align_feature_graph(g, p, stages[u], u, hs, ws)?;
        if u == cfg.target_stage {
            fbar = Some(a);
        }
        aligned.push(a);
    }
    let z = if aligned.len() == 1 { aligned[0] } else { g.cat_rows(&aligned)? };
    Ok(FrameTokens {
        z,
        fbar: fbar.expect("target stage is always a source"),
    })
}

/// Multi-head scaled dot-product attention on `[d, N]` token matrices.
/// Returns the concatenated head outputs `[d, Nq]` and each head's
/// `[Nq, Nk]` attention matrix.
pub fn attention_graph(g: &mut Graph, q: Var, k: Var, v: Var, num_heads: usize) -> Result<(Var, Vec<Var>)> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::Shape(format!("attention expects [d, N], got {qs:?} {ks:?} {vs:?}")));
    }
    let d = qs[0];
    if ks[0] != d || vs[0] != d || ks[1] != vs[1] || num_heads == 0 || d % num_heads != 0 {
        return Err(Error::Shape(format!(
            "attention dims q {qs:?} k {ks:?} v {vs:?} heads {num_heads}"
        )));
    }
    let dh = d / num_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    let mut probs = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = if num_heads == 1 { q } else { g.narrow_rows(q, h * dh, dh)? };
        let kh = if num_heads == 1 { k } else { g.narrow_rows(k, h * dh, dh)? };
        let vh = if num_heads == 1 { v } else { g.narrow_rows(v, h * dh, dh)? };
        let logits = g.matmul(qh, kh, true, false)?;
        let logits = g.scale(logits, scale);
        let pr = g.softmax_rows(logits)?;
        heads.push(g.matmul(vh, pr, false, true)?);
        probs.push(pr);
    }
    let out = if num_heads == 1 { heads[0] } else { g.cat_rows(&heads)? };
    Ok((out, probs))
}

/// Attention without gradient tracking; see [`attention_graph`].
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, num_heads: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let (q, k, v) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
    let (out, _) = attention_graph(&mut g, q, k, v, num_heads)?;
    Ok(g.value(out).clone())
}

/// Output of [`cma_forward_graph`] for the requested frames.
#[derive(Clone, Debug)]
pub struct CmaGraphOutput {
    /// `(frame, Ftilde [C, Hs, Ws])`.
    pub outputs: Vec<(usize, Var)>,
    /// `(frame, per-head attention matrices)`.
    pub attention: Vec<(usize, Vec<Var>)>,
    pub tokens: Vec<FrameTokens>,
}

/// Run aggregation for the frames in `wanted` (all frames when `None`).
pub fn cma_forward_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &CmaConfig,
    pyramids: &[[Var; NUM_STAGES]],
    roles: &[FrameRole],
    wanted: Option<&[usize]>,
) -> Result<CmaGraphOutput> {
    cfg.validate()?;
    validate_roles(roles)?;
    if pyramids.len() != roles.len() {
        return Err(Error::Shape(format!(
            "{} pyramids for {} roles",
            pyramids.len(),
            roles.len()
        )));
    }
    let all: Vec<usize> = (0..roles.len()).collect();
    let wanted = wanted.unwrap_or(&all);

    let tokens = pyramids
        .iter()
        .map(|st| token_set_graph(g, p, cfg, st))
        .collect::<Result<Vec<_>>>()?;
    let mut kv = Vec::with_capacity(tokens.len());
    for ft in &tokens {
        let s = g.shape(ft.z).to_vec();
        let flat = g.reshape(ft.z, &[s[0], s[1] * s[2]])?;
        let k = linear_named(g, p, flat, "cma.k")?;
        let v = linear_named(g, p, flat, "cma.v")?;
        kv.push((k, v, flat));
    }

    let mut outputs = Vec::with_capacity(wanted.len());
    let mut attention = Vec::with_capacity(wanted.len());
    for &t in wanted {
        let vis = visible_frames(roles, t, cfg.causal)?;
        let (k, v) = if vis.len() == 1 {
            (kv[vis[0]].0, kv[vis[0]].1)
        } else {
            let ks: Vec<Var> = vis.iter().map(|&f| kv[f].0).collect();
            let vs: Vec<Var> = vis.iter().map(|&f| kv[f].1).collect();
            (g.cat_cols(&ks)?, g.cat_cols(&vs)?)
        };
        let fbar = tokens[t].fbar;
        let shape = g.shape(fbar).to_vec();
        let (c, n) = (shape[0], shape[1] * shape[2]);
        let q = match roles[t] {
            FrameRole::Reference => linear_named(g, p, kv[t].2, "cma.q_tokens")?,
            _ => {
                let flat = g.reshape(fbar, &[c, n])?;
                linear_named(g, p, flat, "cma.q_feature")?
            }
        };
        let (heads, probs) = attention_graph(g, q, k, v, cfg.num_heads)?;
        let a = linear_named(g, p, heads, "cma.out")?;
        let a = g.reshape(a, &shape)?;
        let fhat = g.add(fbar, a)?;
        let ln = g.norm(fhat, p.var("cma.ln.gamma")?, p.var("cma.ln.beta")?, NormMode::Token)?;
        let h = linear_named(g, p, ln, "cma.ffn1")?;
        let h = g.gelu(h);
        let h = linear_named(g, p, h, "cma.ffn2")?;
        let out = g.add(fhat, h)?;
        outputs.push((t, out));
        attention.push((t, probs));
    }
    Ok(CmaGraphOutput {
        outputs,
        attention,
        tokens,
    })
}

fn bind_pyramids(g: &mut Graph, pyramids: &[FeaturePyramid]) -> Vec<[Var; NUM_STAGES]> {
    pyramids
        .iter()
        .map(|pyr| pyr.stages.clone().map(|t| g.leaf(t)))
        .collect()
}

/// Aggregated feature `Ftilde` for every frame of a clip.
pub fn cma_forward(
    pyramids: &[FeaturePyramid],
    roles: &[FrameRole],
    params: &ParamStore,
    cfg: &CmaConfig,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let p = params.with_prefix("cma.").bind(&mut g);
    let pv = bind_pyramids(&mut g, pyramids);
    let out = cma_forward_graph(&mut g, &p, cfg, &pv, roles, None)?;
    Ok(out.outputs.iter().map(|&(_, v)| g.value(v).clone()).collect())
}

/// Align one pyramid stage to a target grid.
pub fn align_feature(f_u: &Tensor, u: usize, target_hw: (usize, usize), params: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.with_prefix(&format!("cma.align{u}.")).bind(&mut g);
    let x = g.leaf(f_u.clone());
    let y = align_feature_graph(&mut g, &p, x, u, target_hw.0, target_hw.1)?;
    Ok(g.value(y).clone())
}

/// Token set of one frame.
pub fn build_token_set(
    pyramid: &FeaturePyramid,
    cfg: &CmaConfig,
    params: &ParamStore,
    frame_index: usize,
    role: FrameRole,
) -> Result<TokenSet> {
    let mut g = Graph::new();
    let p = params.with_prefix("cma.align").bind(&mut g);
    let st = pyramid.stages.clone().map(|t| g.leaf(t));
    let ft = token_set_graph(&mut g, &p, cfg, &st)?;
    Ok(TokenSet {
        grid: g.value(ft.z).clone(),
        frame_index,
        role,
    })
}

/// Projected key and value sequences `[d, n_visible * Hs * Ws]` for frame
/// `t`, with the frames they cover.
pub fn build_causal_kv(
    token_sets: &[TokenSet],
    t: usize,
    cfg: &CmaConfig,
    params: &ParamStore,
) -> Result<(Tensor, Tensor, Vec<usize>)> {
    for w in token_sets.windows(2) {
        if w[1].frame_index <= w[0].frame_index {
            return Err(Error::Ordering(format!(
                "frame {} follows frame {}",
                w[1].frame_index, w[0].frame_index
            )));
        }
    }
    let roles: Vec<FrameRole> = token_sets.iter().map(|ts| ts.role).collect();
    let vis = visible_frames(&roles, t, cfg.causal)?;
    let mut g = Graph::new();
    let p = params.with_prefix("cma.").bind(&mut g);
    let mut ks = Vec::new();
    let mut vs = Vec::new();
    for &f in &vis {
        let z = g.leaf(token_sets[f].tokens());
        ks.push(linear_named(&mut g, &p, z, "cma.k")?);
        vs.push(linear_named(&mut g, &p, z, "cma.v")?);
    }
    let k = g.cat_cols(&ks)?;
    let v = g.cat_cols(&vs)?;
    Ok((g.value(k).clone(), g.value(v).clone(), vis))
}

/// Per-frame audit record: key/value membership and attention row sums.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameAudit {
    pub frame: usize,
    pub role: FrameRole,
    pub kv_frames: Vec<usize>,
    pub kv_len: usize,
    pub row_sum_min: f64,
    pub row_sum_max: f64,
}

/// Membership tables and softmax row sums for every frame of a clip.
pub fn cma_audit(
    pyramids: &[FeaturePyramid],
    roles: &[FrameRole],
    params: &ParamStore,
    cfg: &CmaConfig,
) -> Result<Vec<FrameAudit>> {
    let mut g = Graph::new();
    let p = params.with_prefix("cma.").bind(&mut g);
    let pv = bind_pyramids(&mut g, pyramids);
    let out = cma_forward_graph(&mut g, &p, cfg, &pv, roles, None)?;
    out.attention
        .iter()
        .map(|(t, probs)| {
            let kv_frames = visible_frames(roles, *t, cfg.causal)?;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            let mut kv_len = 0;
            for &pr in probs {
                let m = g.value(pr);
                kv_len = m.shape()[1];
                for row in m.data().chunks(kv_len.max(1)) {
                    let s: f64 = row.iter().sum();
                    lo = lo.min(s);
                    hi = hi.max(s);
                }
            }
            Ok(FrameAudit {
                frame: *t,
                role: roles[*t],
                kv_frames,
                kv_len,
                row_sum_min: lo,
                row_sum_max: hi,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::role_layout;
    use crate::encoder::stage_shape;
    use FrameRole::*;

    fn random_pyramid(rng: &mut SeededRng, c: usize, h: usize, w: usize) -> FeaturePyramid {
        let stages = [0, 1, 2, 3].map(|s| {
            let sh = stage_shape(s, c, h, w);
            Tensor::from_fn(&sh, |_| rng.normal())
        });
        FeaturePyramid {
            stages,
            base_channels: c,
        }
    }

    #[test]
    fn visibility_rules() {
        let roles = role_layout(6, 2);
        assert_eq!(visible_frames(&roles, 0, true).unwrap(), vec![0]);
        assert_eq!(visible_frames(&roles, 1, true).unwrap(), vec![1]);
        assert_eq!(visible_frames(&roles, 3, true).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(visible_frames(&roles, 5, true).unwrap(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(visible_frames(&roles, 0, false).unwrap().len(), 6);
    }

    #[test]
    fn kv_length_follows_membership() {
        // clip positions 0..6; position 3 is the adjacent frame numbered 4
        // when frames are counted from one.
        let cfg = CmaConfig::new(4, 2);
        let params = init_cma(3, &cfg).unwrap();
        let mut rng = SeededRng::new(9);
        let roles = role_layout(6, 2);
        let sets: Vec<TokenSet> = (0..6)
            .map(|i| {
                let pyr = random_pyramid(&mut rng, 4, 64, 64);
                build_token_set(&pyr, &cfg, &params, i, roles[i]).unwrap()
            })
            .collect();
        let n = sets[0].num_tokens();
        let (k, v, frames) = build_causal_kv(&sets, 3, &cfg, &params).unwrap();
        assert_eq!(frames, vec![0, 1, 2, 3]);
        assert_eq!(k.shape(), &[4, 4 * n]);
        assert_eq!(v.shape(), &[4, 4 * n]);
        let (k, _, _) = build_causal_kv(&sets, 0, &cfg, &params).unwrap();
        assert_eq!(k.shape()[1], n);
        let (k, _, f) = build_causal_kv(&sets, 5, &cfg, &params).unwrap();
        assert_eq!(f.len(), 6);
        assert_eq!(k.shape()[1], 6 * n);

        let mut shuffled = sets.clone();
        shuffled.swap(2, 3);
        assert!(matches!(
            build_causal_kv(&shuffled, 5, &cfg, &params),
            Err(Error::Ordering(_))
        ));
    }

    #[test]
    fn token_set_has_sc_channels() {
        let cfg = CmaConfig::new(32, 4);
        let params = init_cma(1, &cfg).unwrap();
        let mut rng = SeededRng::new(2);
        let pyr = random_pyramid(&mut rng, 32, 64, 64);
        let ts = build_token_set(&pyr, &cfg, &params, 0, Current).unwrap();
        assert_eq!(ts.grid.shape(), &[128, 2, 2]);
    }

    #[test]
    fn token_set_blocks_follow_source_order() {
        let cfg = CmaConfig::new(4, 2);
        let params = init_cma(1, &cfg).unwrap();
        let mut rng = SeededRng::new(4);
        let pyr = random_pyramid(&mut rng, 4, 64, 64);
        let ts = build_token_set(&pyr, &cfg, &params, 0, Current).unwrap();
        let hw = (2, 2);
        for u in 0..4 {
            let a = align_feature(&pyr.stages[u], u, hw, &params).unwrap();
            assert_eq!(ts.grid.narrow_rows(4 * u, 4).unwrap(), a);
        }
        // a permuted source order is exactly the block-swapped token set
        let blocks: Vec<Tensor> = (0..4).map(|u| ts.grid.narrow_rows(4 * u, 4).unwrap()).collect();
        let permuted = Tensor::cat_rows(&[&blocks[1], &blocks[0], &blocks[2], &blocks[3]]).unwrap();
        assert_eq!(permuted.narrow_rows(0, 4).unwrap(), ts.grid.narrow_rows(4, 4).unwrap());
        assert_eq!(permuted.narrow_rows(8, 8).unwrap(), ts.grid.narrow_rows(8, 8).unwrap());
    }

    #[test]
    fn single_source_token_set_is_aligned_feature() {
        let cfg = CmaConfig {
            multiscale: false,
            ..CmaConfig::new(4, 2)
        };
        let params = init_cma(1, &cfg).unwrap();
        let mut rng = SeededRng::new(5);
        let pyr = random_pyramid(&mut rng, 4, 64, 64);
        let ts = build_token_set(&pyr, &cfg, &params, 0, Current).unwrap();
        let a = align_feature(&pyr.stages[3], 3, (2, 2), &params).unwrap();
        assert_eq!(ts.grid, a);
    }

    #[test]
    fn identity_alignment_restricts_channels() {
        let c = 4;
        let cfg = CmaConfig::new(c, 2);
        let mut params = init_cma(1, &cfg).unwrap();
        let cu = c << 3;
        let w3 = Tensor::from_fn(&[c, cu, 3, 3], |i| {
            let (o, rest) = (i / (cu * 9), i % (cu * 9));
            let (ci, k) = (rest / 9, rest % 9);
            if o == ci && k == 4 {
                1.0
            } else {
                0.0
            }
        });
        params.insert("cma.align2.conv3.weight", w3);
        params.insert(
            "cma.align2.conv1.weight",
            Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 }),
        );
        let mut rng = SeededRng::new(1);
        let f = Tensor::from_fn(&[cu, 4, 4], |_| rng.normal());
        let out = align_feature(&f, 2, (4, 4), &params).unwrap();
        assert_eq!(out, f.narrow_rows(0, c).unwrap());
    }

    #[test]
    fn alignment_of_constant_input_is_constant() {
        let c = 4;
        let cfg = CmaConfig::new(c, 2);
        let mut params = init_cma(8, &cfg).unwrap();
        params.insert("cma.align0.conv3.bias", Tensor::new(&[4], vec![0.1, 0.2, -0.3, 0.0]).unwrap());
        let f = Tensor::full(&[2 * c, 16, 16], 0.7);
        let out = align_feature(&f, 0, (2, 2), &params).unwrap();
        assert_eq!(out.shape(), &[c, 2, 2]);
        // 2x2 output with 3x3 zero-padded conv: every output position sees
        // the same 4 of 9 taps (the corner pattern differs per position),
        // so compare each position with the analytic affine value.
        let w3 = params.get("cma.align0.conv3.weight").unwrap();
        let b3 = params.get("cma.align0.conv3.bias").unwrap();
        let w1 = params.get("cma.align0.conv1.weight").unwrap();
        let b1 = params.get("cma.align0.conv1.bias").unwrap();
        for y in 0..2usize {
            for x in 0..2usize {
                let mut mid = vec![0.0; c];
                for (o, m) in mid.iter_mut().enumerate() {
                    *m = b3.data()[o];
                    for ci in 0..2 * c {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let (iy, ix) = (y + ky, x + kx);
                                if (1..3).contains(&iy) && (1..3).contains(&ix) {
                                    *m += 0.7 * w3.data()[((o * 2 * c + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                }
                for o in 0..c {
                    let want: f64 = b1.data()[o] + (0..c).map(|i| w1.data()[o * c + i] * mid[i]).sum::<f64>();
                    assert!((out.at3(o, y, x) - want).abs() < 1e-12);
                }
            }
        }
        // on a grid large enough to have interior positions, those are equal
        let out = align_feature(&f, 0, (8, 8), &params).unwrap();
        for o in 0..c {
            let v = out.at3(o, 3, 3);
            assert!((out.at3(o, 4, 5) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_single_key_returns_value() {
        let mut rng = SeededRng::new(3);
        let q = Tensor::from_fn(&[8, 5], |_| rng.normal());
        let k = Tensor::from_fn(&[8, 1], |_| rng.normal());
        let v = Tensor::from_fn(&[8, 1], |_| rng.normal());
        let out = attention(&q, &k, &v, 1).unwrap();
        for r in 0..8 {
            for c in 0..5 {
                assert!((out.data()[r * 5 + c] - v.data()[r]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_uniform_over_identical_values() {
        let q = Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap();
        let k = Tensor::new(&[2, 3], vec![0.0, 0.0, 0.0, 1.0, -2.0, 5.0]).unwrap();
        let v = Tensor::new(&[2, 3], vec![0.3, 0.3, 0.3, -1.0, -1.0, -1.0]).unwrap();
        let out = attention(&q, &k, &v, 1).unwrap();
        assert!((out.data()[0] - 0.3).abs() < 1e-15);
        assert!((out.data()[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn attention_dimension_mismatch() {
        let q = Tensor::zeros(&[4, 2]);
        let k = Tensor::zeros(&[4, 3]);
        let v = Tensor::zeros(&[4, 2]);
        assert!(attention(&q, &k, &v, 1).is_err());
        assert!(attention(&q, &k, &Tensor::zeros(&[4, 3]), 3).is_err());
    }

    #[test]
    fn residual_identity_with_zeroed_branches() {
        let cfg = CmaConfig::new(4, 2);
        let mut params = init_cma(2, &cfg).unwrap();
        for n in ["cma.out.weight", "cma.out.bias", "cma.ffn2.weight", "cma.ffn2.bias"] {
            let s = params.get(n).unwrap().shape().to_vec();
            params.insert(n, Tensor::zeros(&s));
        }
        let mut rng = SeededRng::new(6);
        let pyrs: Vec<_> = (0..4).map(|_| random_pyramid(&mut rng, 4, 64, 64)).collect();
        let roles = role_layout(4, 2);
        let out = cma_forward(&pyrs, &roles, &params, &cfg).unwrap();
        for (t, o) in out.iter().enumerate() {
            let fbar = align_feature(&pyrs[t].stages[3], 3, (2, 2), &params).unwrap();
            assert_eq!(o, &fbar);
        }
    }

    #[test]
    fn causality_is_exact() {
        let cfg = CmaConfig::new(4, 2);
        let params = init_cma(2, &cfg).unwrap();
        let mut rng = SeededRng::new(7);
        let mut pyrs: Vec<_> = (0..6).map(|_| random_pyramid(&mut rng, 4, 64, 64)).collect();
        let roles = role_layout(6, 2);
        let base = cma_forward(&pyrs, &roles, &params, &cfg).unwrap();
        pyrs[4].stages[3].data_mut()[3] += 1.0;
        let pert = cma_forward(&pyrs, &roles, &params, &cfg).unwrap();
        for t in 0..4 {
            assert_eq!(base[t], pert[t]);
        }
        assert_ne!(base[4], pert[4]);
        assert_ne!(base[5], pert[5]);
    }

    #[test]
    fn audit_rows_sum_to_one() {
        let cfg = CmaConfig::new(4, 2);
        let params = init_cma(2, &cfg).unwrap();
        let mut rng = SeededRng::new(8);
        let pyrs: Vec<_> = (0..6).map(|_| random_pyramid(&mut rng, 4, 64, 64)).collect();
        let roles = role_layout(6, 2);
        let audit = cma_audit(&pyrs, &roles, &params, &cfg).unwrap();
        assert_eq!(audit.len(), 6);
        for a in &audit {
            assert!((a.row_sum_min - 1.0).abs() < 1e-6 && (a.row_sum_max - 1.0).abs() < 1e-6);
            assert_eq!(a.kv_len, a.kv_frames.len() * 4);
        }
        assert_eq!(audit[0].role, Reference);
        assert_eq!(audit[3].kv_frames, vec![0, 1, 2, 3]);
    }

    #[test]
    fn swapping_adjacent_frames_changes_partial_views_only() {
        let cfg = CmaConfig::new(4, 2);
        let params = init_cma(2, &cfg).unwrap();
        let mut rng = SeededRng::new(10);
        let mut pyrs: Vec<_> = (0..6).map(|_| random_pyramid(&mut rng, 4, 64, 64)).collect();
        let roles = role_layout(6, 2);
        let base = cma_forward(&pyrs, &roles, &params, &cfg).unwrap();
        pyrs.swap(2, 3);
        let swapped = cma_forward(&pyrs, &roles, &params, &cfg).unwrap();
        // adjacent frame at position 2 now sees a different key set
        assert_ne!(base[2], swapped[2]);
        // the current frame sees the same set of frames in another order
        assert!(base[5].max_abs_diff(&swapped[5]) < 1e-12);
    }
}
