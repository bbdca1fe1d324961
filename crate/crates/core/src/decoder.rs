//! Prediction heads.
//!
//! * `pred1`: 1x1 conv on the aggregated feature (the coarse head).
//! * `pred2`: Decoder1 on `resize(Ftilde) ++ stage2`.
//! * `pred3`: Decoder2 on `resize(Decoder1 features) ++ stage1`.
//!
//! Each decoder is `concat -> conv3x3 -> norm -> GELU -> conv3x3`, followed
//! by a 1x1 head to one logit channel. All three logit maps are bilinearly
//! resized to the ground-truth resolution.

use crate::encoder::{FeaturePyramid, NUM_STAGES};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{sigmoid, NormMode};
use crate::params::{Bound, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Coarse and decoded logit maps, each `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTriple {
    pub pred1: Tensor,
    pub pred2: Tensor,
    pub pred3: Tensor,
}

impl PredictionTriple {
    pub fn logits(&self) -> [&Tensor; 3] {
        [&self.pred1, &self.pred2, &self.pred3]
    }

    pub fn probs(&self) -> [Tensor; 3] {
        self.logits().map(|t| t.map(sigmoid))
    }

    /// Final prediction as probabilities.
    pub fn final_prob(&self) -> Tensor {
        self.pred3.map(sigmoid)
    }
}

/// Stage feeding Decoder1 and Decoder2 respectively.
pub const DECODER1_SKIP: usize = 2;
pub const DECODER2_SKIP: usize = 1;

pub fn init_decoder(seed: u64, base_channels: usize) -> Result<ParamStore> {
    if base_channels == 0 {
        return Err(Error::InvalidConfig("decoder width must be >= 1".into()));
    }
    let c = base_channels;
    let mut rng = SeededRng::derived(seed, 0xDEC);
    let mut p = ParamStore::new();
    p.init_weight(&mut rng, "decoder.coarse.weight", &[1, c], c);
    p.init_const("decoder.coarse.bias", &[1], 0.0);
    for (name, skip) in [("dec1", DECODER1_SKIP), ("dec2", DECODER2_SKIP)] {
        let cin = c + (c << (skip + 1));
        p.init_weight(&mut rng, &format!("decoder.{name}.conv1.weight"), &[c, cin, 3, 3], cin * 9);
        p.init_const(&format!("decoder.{name}.conv1.bias"), &[c], 0.0);
        p.init_const(&format!("decoder.{name}.norm.gamma"), &[c], 1.0);
        p.init_const(&format!("decoder.{name}.norm.beta"), &[c], 0.0);
        p.init_weight(&mut rng, &format!("decoder.{name}.conv2.weight"), &[c, c, 3, 3], c * 9);
        p.init_const(&format!("decoder.{name}.conv2.bias"), &[c], 0.0);
        p.init_weight(&mut rng, &format!("decoder.{name}.head.weight"), &[1, c], c);
        p.init_const(&format!("decoder.{name}.head.bias"), &[1], 0.0);
    }
    Ok(p)
}

/// Single-channel logits `[1, Hs, Ws]` from the aggregated feature.
pub fn coarse_head_graph(g: &mut Graph, p: &Bound, agg: Var) -> Result<Var> {
    g.linear(agg, p.var("decoder.coarse.weight")?, Some(p.var("decoder.coarse.bias")?))
}

fn decoder_block(g: &mut Graph, p: &Bound, name: &str, coarse: Var, skip: Var) -> Result<(Var, Var)> {
    let ss = g.shape(skip).to_vec();
    let up = g.resize(coarse, ss[1], ss[2])?;
    let x = g.cat_rows(&[up, skip])?;
    let pre = format!("decoder.{name}");
    let x = g.conv2d(
        x,
        p.var(&format!("{pre}.conv1.weight"))?,
        Some(p.var(&format!("{pre}.conv1.bias"))?),
        1,
        1,
    )?;
    let x = g.norm(
        x,
        p.var(&format!("{pre}.norm.gamma"))?,
        p.var(&format!("{pre}.norm.beta"))?,
        NormMode::Sample,
    )?;
    let x = g.gelu(x);
    let feat = g.conv2d(
        x,
        p.var(&format!("{pre}.conv2.weight"))?,
        Some(p.var(&format!("{pre}.conv2.bias"))?),
        1,
        1,
    )?;
    let logits = g.linear(
        feat,
        p.var(&format!("{pre}.head.weight"))?,
        Some(p.var(&format!("{pre}.head.bias"))?),
    )?;
    Ok((feat, logits))
}

/// Graph handles produced by [`decode_graph`].
#[derive(Clone, Copy, Debug)]
pub struct DecodeVars {
    /// Coarse logits at the aggregation grid, `[1, Hs, Ws]`.
    pub coarse: Var,
    /// `[H, W]` logits.
    pub pred1: Var,
    pub pred2: Var,
    pub pred3: Var,
}

fn to_output(g: &mut Graph, logits: Var, out_hw: (usize, usize)) -> Result<Var> {
    let r = g.resize(logits, out_hw.0, out_hw.1)?;
    g.reshape(r, &[out_hw.0, out_hw.1])
}

pub fn decode_graph(
    g: &mut Graph,
    p: &Bound,
    agg: Var,
    stages: &[Var; NUM_STAGES],
    out_hw: (usize, usize),
) -> Result<DecodeVars> {
    let coarse = coarse_head_graph(g, p, agg)?;
    let (f1, l2) = decoder_block(g, p, "dec1", agg, stages[DECODER1_SKIP])?;
    let (_, l3) = decoder_block(g, p, "dec2", f1, stages[DECODER2_SKIP])?;
    Ok(DecodeVars {
        coarse,
        pred1: to_output(g, coarse, out_hw)?,
        pred2: to_output(g, l2, out_hw)?,
        pred3: to_output(g, l3, out_hw)?,
    })
}

/// Coarse logits `[Hs, Ws]`.
pub fn coarse_head(agg: &Tensor, params: &ParamStore) -> Result<Tensor> {
    let (_, h, w) = agg.dims3()?;
    let mut g = Graph::new();
    let p = params.with_prefix("decoder.coarse.").bind(&mut g);
    let a = g.leaf(agg.clone());
    let y = coarse_head_graph(&mut g, &p, a)?;
    g.value(y).clone().reshape(&[h, w])
}

/// Decode one frame's aggregated feature with its own pyramid.
pub fn decode(agg: &Tensor, pyramid: &FeaturePyramid, out_hw: (usize, usize), params: &ParamStore) -> Result<PredictionTriple> {
    let (c, _, _) = agg.dims3()?;
    if c != pyramid.base_channels {
        return Err(Error::Shape(format!(
            "aggregated feature has {c} channels, pyramid base is {}",
            pyramid.base_channels
        )));
    }
    let mut g = Graph::new();
    let p = params.with_prefix("decoder.").bind(&mut g);
    let a = g.leaf(agg.clone());
    let st = pyramid.stages.clone().map(|t| g.leaf(t));
    let d = decode_graph(&mut g, &p, a, &st, out_hw)?;
    Ok(PredictionTriple {
        pred1: g.value(d.pred1).clone(),
        pred2: g.value(d.pred2).clone(),
        pred3: g.value(d.pred3).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::stage_shape;

    fn pyramid(c: usize, h: usize, w: usize, seed: u64) -> FeaturePyramid {
        let mut rng = SeededRng::new(seed);
        FeaturePyramid {
            stages: [0, 1, 2, 3].map(|s| Tensor::from_fn(&stage_shape(s, c, h, w), |_| rng.normal())),
            base_channels: c,
        }
    }

    #[test]
    fn coarse_head_constant_with_zero_weights() {
        let mut p = init_decoder(0, 4).unwrap();
        p.insert("decoder.coarse.weight", Tensor::zeros(&[1, 4]));
        p.insert("decoder.coarse.bias", Tensor::full(&[1], 0.7));
        let agg = Tensor::from_fn(&[4, 3, 3], |i| i as f64);
        let y = coarse_head(&agg, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
        assert!((sigmoid(0.7) - 1.0 / (1.0 + (-0.7f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn coarse_head_identity_and_loop_oracle() {
        let mut p = init_decoder(0, 1).unwrap();
        p.insert("decoder.coarse.weight", Tensor::full(&[1, 1], 1.0));
        let agg = Tensor::from_fn(&[1, 3, 3], |i| i as f64 - 4.0);
        assert_eq!(coarse_head(&agg, &p).unwrap().data(), agg.data());

        let p = init_decoder(3, 4).unwrap();
        let mut rng = SeededRng::new(1);
        let agg = Tensor::from_fn(&[4, 3, 3], |_| rng.normal());
        let y = coarse_head(&agg, &p).unwrap();
        let w = p.get("decoder.coarse.weight").unwrap();
        let b = p.get("decoder.coarse.bias").unwrap().data()[0];
        for yy in 0..3 {
            for xx in 0..3 {
                let want: f64 = b + (0..4).map(|c| w.data()[c] * agg.at3(c, yy, xx)).sum::<f64>();
                assert!((y.data()[yy * 3 + xx] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn outputs_at_ground_truth_resolution() {
        for (h, c) in [(64, 4), (352, 2)] {
            let p = init_decoder(1, c).unwrap();
            let pyr = pyramid(c, h, h, 2);
            let agg = Tensor::zeros(&[c, h / 32, h / 32]);
            let pred = decode(&agg, &pyr, (h, h), &p).unwrap();
            for t in pred.logits() {
                assert_eq!(t.shape(), &[h, h]);
            }
        }
    }

    #[test]
    fn zero_decoder_weights_give_zero_logits() {
        let mut p = init_decoder(1, 4).unwrap();
        let names: Vec<String> = p.names().cloned().collect();
        for n in names {
            let s = p.get(&n).unwrap().shape().to_vec();
            p.insert(n, Tensor::zeros(&s));
        }
        let pyr = pyramid(4, 64, 64, 3);
        let agg = Tensor::from_fn(&[4, 2, 2], |i| i as f64);
        let pred = decode(&agg, &pyr, (64, 64), &p).unwrap();
        assert!(pred.pred2.data().iter().all(|&v| v == 0.0));
        assert!(pred.pred3.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_error() {
        let p = init_decoder(1, 4).unwrap();
        let pyr = pyramid(4, 64, 64, 3);
        let agg = Tensor::zeros(&[3, 2, 2]);
        assert!(decode(&agg, &pyr, (64, 64), &p).is_err());
    }
}
