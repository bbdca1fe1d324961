//! The full network: shared encoder, aggregation over the clip, decoder on
//! the current frame.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clip::{role_layout, FrameRole};
use crate::cma::{align_feature_graph, cma_forward_graph, init_cma, CmaConfig};
use crate::decoder::{decode_graph, init_decoder, DecodeVars, PredictionTriple};
use crate::encoder::{encode_frame, encode_frame_graph, init_encoder, FeaturePyramid, NUM_STAGES};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::sigmoid;
use crate::losses::{boundary_weights, LossReport};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Architecture switches saved with a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub num_heads: usize,
    pub target_stage: usize,
    pub clip_len: usize,
    pub num_references: usize,
    /// When false the aggregated feature is the aligned target stage alone.
    pub use_cma: bool,
    pub multiscale: bool,
    pub causal: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            num_heads: 4,
            target_stage: 3,
            clip_len: 6,
            num_references: 2,
            use_cma: true,
            multiscale: true,
            causal: true,
        }
    }
}

impl ModelConfig {
    pub fn cma_config(&self) -> CmaConfig {
        let mut c = CmaConfig::new(self.base_channels, self.num_heads);
        c.target_stage = self.target_stage;
        c.multiscale = self.multiscale;
        c.causal = self.causal;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_len <= self.num_references + 1 {
            return Err(Error::InvalidConfig(format!(
                "clip length {} must exceed references {} + 1",
                self.clip_len, self.num_references
            )));
        }
        if self.num_references == 0 {
            return Err(Error::InvalidConfig("at least one reference frame is required".into()));
        }
        self.cma_config().validate()
    }

    pub fn roles(&self) -> Vec<FrameRole> {
        role_layout(self.clip_len, self.num_references)
    }

    pub fn num_adjacent(&self) -> usize {
        self.clip_len - self.num_references - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Graph handles for one clip's current-frame prediction.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Aggregated current-frame feature `[C, Hs, Ws]`.
    pub agg: Var,
    pub decode: DecodeVars,
}

/// Inference result for the current frame of a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipPrediction {
    pub triple: PredictionTriple,
    /// Aggregated feature `[C, Hs, Ws]`.
    pub agg: Tensor,
    /// Sigmoid of the coarse head at stage resolution `[Hs, Ws]`.
    pub coarse_prob: Tensor,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = init_encoder(seed, config.base_channels)?;
        let cma = init_cma(seed, &config.cma_config())?;
        if config.use_cma {
            params.extend(cma);
        } else {
            params.extend(cma.with_prefix(&format!("cma.align{}.", config.target_stage)));
        }
        params.extend(init_decoder(seed, config.base_channels)?);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::init(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, config expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, config expects {}",
                params.len(),
                reference.params.len()
            )));
        }
        Ok(Self { config, params })
    }

    pub fn encode(&self, frame: &Tensor) -> Result<FeaturePyramid> {
        encode_frame(frame, &self.params)
    }

    /// Aggregate and decode the last frame of a clip given its pyramids.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        pyramids: &[[Var; NUM_STAGES]],
        roles: &[FrameRole],
        out_hw: (usize, usize),
    ) -> Result<ForwardVars> {
        let cur = pyramids
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::Empty("clip without frames".into()))?;
        let cfg = self.config.cma_config();
        let agg = if self.config.use_cma {
            let out = cma_forward_graph(g, p, &cfg, pyramids, roles, Some(&[cur]))?;
            out.outputs[0].1
        } else {
            let s = cfg.target_stage;
            let sh = g.shape(pyramids[cur][s]).to_vec();
            align_feature_graph(g, p, pyramids[cur][s], s, sh[1], sh[2])?
        };
        let decode = decode_graph(g, p, agg, &pyramids[cur], out_hw)?;
        Ok(ForwardVars { agg, decode })
    }

    /// Prediction for the last frame of an already encoded clip.
    pub fn predict(&self, pyramids: &[FeaturePyramid], out_hw: (usize, usize)) -> Result<ClipPrediction> {
        if pyramids.len() != self.config.clip_len {
            return Err(Error::Shape(format!(
                "clip of {} frames, model expects {}",
                pyramids.len(),
                self.config.clip_len
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let pv: Vec<[Var; NUM_STAGES]> = pyramids.iter().map(|pyr| pyr.stages.clone().map(|t| g.leaf(t))).collect();
        let f = self.forward_graph(&mut g, &p, &pv, &self.config.roles(), out_hw)?;
        let coarse = g.value(f.decode.coarse);
        let (hs, ws) = (coarse.shape()[1], coarse.shape()[2]);
        Ok(ClipPrediction {
            triple: PredictionTriple {
                pred1: g.value(f.decode.pred1).clone(),
                pred2: g.value(f.decode.pred2).clone(),
                pred3: g.value(f.decode.pred3).clone(),
            },
            agg: g.value(f.agg).clone(),
            coarse_prob: coarse.map(sigmoid).reshape(&[hs, ws])?,
        })
    }

    /// Summed three-head loss for a clip of raw frames, supervised by the
    /// current frame's mask.
    pub fn loss_graph(&self, g: &mut Graph, p: &Bound, frames: &[Tensor], gt: &Tensor) -> Result<(Var, LossReport, ForwardVars)> {
        let mut pyr = Vec::with_capacity(frames.len());
        for f in frames {
            let x = g.leaf(f.clone());
            pyr.push(encode_frame_graph(g, p, x)?);
        }
        self.pyramid_loss_graph(g, p, &pyr, gt)
    }

    /// As [`Model::loss_graph`] but starting from pyramid stages already in
    /// the graph.
    pub fn pyramid_loss_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        pyramids: &[[Var; NUM_STAGES]],
        gt: &Tensor,
    ) -> Result<(Var, LossReport, ForwardVars)> {
        let (h, w) = gt.dims2()?;
        let roles = role_layout(pyramids.len(), self.config.num_references);
        let f = self.forward_graph(g, p, pyramids, &roles, (h, w))?;
        let weights = Arc::new(boundary_weights(gt)?);
        let d = f.decode;
        let (l1, t1) = g.seg_loss(d.pred1, gt, &weights)?;
        let (l2, t2) = g.seg_loss(d.pred2, gt, &weights)?;
        let (l3, t3) = g.seg_loss(d.pred3, gt, &weights)?;
        let total = g.sum(&[l1, l2, l3])?;
        Ok((total, LossReport::from_terms([t1, t2, t3]), f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::total_loss;
    use crate::synth::{gen_clip, SynthConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            num_heads: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_checks_clip_length() {
        let mut c = small();
        c.clip_len = 3;
        assert!(c.validate().is_err());
        c.clip_len = 4;
        c.validate().unwrap();
    }

    #[test]
    fn no_cma_keeps_only_target_alignment() {
        let mut c = small();
        c.use_cma = false;
        let m = Model::init(c, 1).unwrap();
        let cma: Vec<_> = m.params.names().filter(|n| n.starts_with("cma.")).collect();
        assert!(cma.iter().all(|n| n.starts_with("cma.align3.")));
        assert_eq!(cma.len(), 4);
    }

    #[test]
    fn graph_loss_matches_plain_total_loss() {
        let m = Model::init(small(), 3).unwrap();
        let clip = gen_clip(&SynthConfig::default()).unwrap();
        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        let gt = clip.current_mask().unwrap().clone();
        let (loss, report, _) = m.loss_graph(&mut g, &p, &clip.frames, &gt).unwrap();
        let pyr: Vec<_> = clip.frames.iter().map(|f| m.encode(f).unwrap()).collect();
        let pred = m.predict(&pyr, (64, 64)).unwrap();
        let plain = total_loss(&pred.triple, &gt).unwrap();
        assert!((g.value(loss).item() - plain.total).abs() < 1e-9);
        assert!((report.total - plain.total).abs() < 1e-9);
    }

    #[test]
    fn from_parts_rejects_mismatch() {
        let m = Model::init(small(), 3).unwrap();
        let mut c = small();
        c.base_channels = 8;
        assert!(Model::from_parts(c, m.params.clone()).is_err());
        Model::from_parts(small(), m.params).unwrap();
    }
}
