//! Tiny convolutional encoder producing a four-stage feature pyramid.
//!
//! Layout for base width `C`:
//!
//! * stem: 3x3 stride-2 conv `3 -> C`, sample norm, GELU (`H/2`)
//! * block `k` in `0..4`: 3x3 stride-2 conv `C*2^k -> C*2^(k+1)`, sample
//!   norm, GELU, then a residual branch `h + GELU(norm(conv3x3(h)))`
//!
//! Block `k` output is pyramid stage `k`: `[2^(k+1) C, H / 2^(k+2), W / 2^(k+2)]`.
//! Weights are uniform in `±1/sqrt(fan_in)`, biases zero, norm gains one
//! and shifts zero.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::NormMode;
use crate::params::{Bound, ParamStore};
use crate::rng::SeededRng;
use crate::synth::INPUT_CHANNELS;
use crate::tensor::Tensor;

pub const NUM_STAGES: usize = 4;

/// Per-frame, per-stage feature grids.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub stages: [Tensor; NUM_STAGES],
    pub base_channels: usize,
}

/// Expected `[C, H, W]` of stage `s` for an `h x w` input.
pub fn stage_shape(s: usize, base_channels: usize, h: usize, w: usize) -> [usize; 3] {
    let f = 1 << (s + 2);
    [base_channels << (s + 1), h / f, w / f]
}

impl FeaturePyramid {
    /// Check the shape law against an `h x w` input.
    pub fn check_shapes(&self, h: usize, w: usize) -> Result<()> {
        for (s, t) in self.stages.iter().enumerate() {
            let want = stage_shape(s, self.base_channels, h, w);
            if t.shape() != want {
                return Err(Error::Shape(format!("stage {s} is {:?}, expected {want:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.stages.iter().all(Tensor::is_finite)
    }
}

fn check_input(h: usize, w: usize) -> Result<()> {
    if h < 32 || w < 32 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Shape(format!(
            "input {h}x{w} must be at least 32 and divisible by 32"
        )));
    }
    Ok(())
}

fn block_channels(k: usize, c: usize) -> (usize, usize) {
    (c << k, c << (k + 1))
}

pub fn init_encoder(seed: u64, base_channels: usize) -> Result<ParamStore> {
    if base_channels == 0 {
        return Err(Error::InvalidConfig("encoder base channels must be >= 1".into()));
    }
    let c = base_channels;
    let mut rng = SeededRng::derived(seed, 0xE1);
    let mut p = ParamStore::new();
    p.init_weight(&mut rng, "encoder.stem.conv.weight", &[c, INPUT_CHANNELS, 3, 3], INPUT_CHANNELS * 9);
    p.init_const("encoder.stem.conv.bias", &[c], 0.0);
    p.init_const("encoder.stem.norm.gamma", &[c], 1.0);
    p.init_const("encoder.stem.norm.beta", &[c], 0.0);
    for k in 0..NUM_STAGES {
        let (cin, cout) = block_channels(k, c);
        let pre = format!("encoder.block{k}");
        p.init_weight(&mut rng, &format!("{pre}.down.weight"), &[cout, cin, 3, 3], cin * 9);
        p.init_const(&format!("{pre}.down.bias"), &[cout], 0.0);
        p.init_const(&format!("{pre}.down_norm.gamma"), &[cout], 1.0);
        p.init_const(&format!("{pre}.down_norm.beta"), &[cout], 0.0);
        p.init_weight(&mut rng, &format!("{pre}.res.weight"), &[cout, cout, 3, 3], cout * 9);
        p.init_const(&format!("{pre}.res.bias"), &[cout], 0.0);
        p.init_const(&format!("{pre}.res_norm.gamma"), &[cout], 1.0);
        p.init_const(&format!("{pre}.res_norm.beta"), &[cout], 0.0);
    }
    Ok(p)
}

/// Closed-form scalar count of [`init_encoder`]: `4590 C^2 + 210 C`.
pub fn encoder_param_count(base_channels: usize) -> usize {
    4590 * base_channels * base_channels + 210 * base_channels
}

/// Base width `C` of an encoder parameter set.
pub fn encoder_base_channels(params: &ParamStore) -> Result<usize> {
    Ok(params.get("encoder.stem.conv.weight")?.shape()[0])
}

fn conv_norm_gelu(g: &mut Graph, p: &Bound, x: Var, conv: &str, norm: &str, stride: usize) -> Result<Var> {
    let y = g.conv2d(
        x,
        p.var(&format!("{conv}.weight"))?,
        Some(p.var(&format!("{conv}.bias"))?),
        stride,
        1,
    )?;
    let y = g.norm(
        y,
        p.var(&format!("{norm}.gamma"))?,
        p.var(&format!("{norm}.beta"))?,
        NormMode::Sample,
    )?;
    Ok(g.gelu(y))
}

/// Encode one `[3, H, W]` frame inside a graph; returns the four stages.
pub fn encode_frame_graph(g: &mut Graph, p: &Bound, frame: Var) -> Result<[Var; NUM_STAGES]> {
    let s = g.shape(frame);
    if s.len() != 3 || s[0] != INPUT_CHANNELS {
        return Err(Error::Shape(format!("frame {s:?}, expected [3, H, W]")));
    }
    check_input(s[1], s[2])?;
    let mut h = conv_norm_gelu(g, p, frame, "encoder.stem.conv", "encoder.stem.norm", 2)?;
    let mut stages = Vec::with_capacity(NUM_STAGES);
    for k in 0..NUM_STAGES {
        let pre = format!("encoder.block{k}");
        let d = conv_norm_gelu(g, p, h, &format!("{pre}.down"), &format!("{pre}.down_norm"), 2)?;
        let r = conv_norm_gelu(g, p, d, &format!("{pre}.res"), &format!("{pre}.res_norm"), 1)?;
        h = g.add(d, r)?;
        stages.push(h);
    }
    Ok([stages[0], stages[1], stages[2], stages[3]])
}

/// Encode one frame without recording gradients.
pub fn encode_frame(frame: &Tensor, params: &ParamStore) -> Result<FeaturePyramid> {
    let c = encoder_base_channels(params)?;
    let mut g = Graph::new();
    let bound = params.with_prefix("encoder.").bind(&mut g);
    let x = g.leaf(frame.clone());
    let st = encode_frame_graph(&mut g, &bound, x)?;
    Ok(FeaturePyramid {
        stages: st.map(|v| g.value(v).clone()),
        base_channels: c,
    })
}

/// Encode every frame of a clip with shared weights (no temporal mixing).
pub fn encode_clip(frames: &[Tensor], params: &ParamStore) -> Result<Vec<FeaturePyramid>> {
    frames.iter().map(|f| encode_frame(f, params)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimum_size_shapes() {
        let p = init_encoder(1, 4).unwrap();
        let f = Tensor::full(&[3, 32, 32], 0.3);
        let pyr = encode_frame(&f, &p).unwrap();
        assert_eq!(pyr.stages[3].shape(), &[64, 1, 1]);
        pyr.check_shapes(32, 32).unwrap();
        assert!(pyr.is_finite());
    }

    #[test]
    fn rejects_non_divisible_input() {
        let p = init_encoder(1, 4).unwrap();
        let f = Tensor::zeros(&[3, 48, 64]);
        assert!(matches!(encode_frame(&f, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(init_encoder(5, 4).unwrap(), init_encoder(5, 4).unwrap());
        assert_ne!(init_encoder(5, 4).unwrap(), init_encoder(6, 4).unwrap());
        assert!(init_encoder(5, 0).is_err());
    }

    #[test]
    fn parameter_count_matches_layer_shapes() {
        for c in [1, 4, 8, 32] {
            // stem conv + bias + norm, then per block: down conv, bias,
            // norm, residual conv, bias, norm.
            let mut n = 3 * 9 * c + c + 2 * c;
            let mut cin = c;
            for _ in 0..4 {
                let cout = 2 * cin;
                n += cin * cout * 9 + cout + 2 * cout + cout * cout * 9 + cout + 2 * cout;
                cin = cout;
            }
            assert_eq!(encoder_param_count(c), n);
            assert_eq!(init_encoder(0, c).unwrap().num_scalars(), n);
        }
        assert_eq!(encoder_param_count(32), 4_706_880);
    }

    #[test]
    fn shared_weights_identical_frames() {
        let p = init_encoder(2, 4).unwrap();
        let f = Tensor::from_fn(&[3, 64, 64], |i| (i % 17) as f64 / 17.0);
        let pyrs = encode_clip(&[f.clone(), f], &p).unwrap();
        assert_eq!(pyrs[0], pyrs[1]);
    }
}
