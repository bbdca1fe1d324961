//! Streaming inference with dynamic reference selection.
//!
//! Each pushed frame is encoded once; its pyramid is cached for reuse as an
//! adjacent or reference frame. The clip for frame `t` is
//! `[semantic slot, confidence slot, adjacent..., t]`. Frame 0 is predicted
//! from a clip made of copies of itself and then seeds both slots. After
//! each prediction the slots are updated with the previous frame as
//! candidate, scored against the frame just predicted.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::decoder::PredictionTriple;
use crate::dmr::{assemble_clip, DmrState, FrameEntry, ReferenceMode, StepAudit};
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamOptions {
    pub semantic_cooldown: usize,
    pub confidence_cooldown: usize,
    /// Keep both references at frame 0.
    pub no_dmr: bool,
    /// Fill both reference positions from the semantic slot.
    pub single_source: bool,
}

impl Default for StreamOptions {
    fn default() -> Self {
        Self {
            semantic_cooldown: crate::dmr::SEMANTIC_COOLDOWN,
            confidence_cooldown: crate::dmr::CONFIDENCE_COOLDOWN,
            no_dmr: false,
            single_source: false,
        }
    }
}

/// Output for one streamed frame.
#[derive(Clone, Debug)]
pub struct FrameResult {
    pub t: usize,
    pub triple: PredictionTriple,
    /// Final foreground probability `[H, W]`.
    pub prob: Tensor,
    pub sem_frame: usize,
    pub conf_frame: usize,
    pub audit: Option<StepAudit>,
    pub latency: Duration,
}

pub struct StreamSession<'m> {
    model: &'m Model,
    opts: StreamOptions,
    state: Option<DmrState<FeaturePyramid>>,
    recent: VecDeque<FeaturePyramid>,
    t: usize,
}

impl<'m> StreamSession<'m> {
    pub fn new(model: &'m Model, opts: StreamOptions) -> Result<Self> {
        if opts.semantic_cooldown == 0 || opts.confidence_cooldown == 0 {
            return Err(Error::InvalidConfig("cooldowns must be >= 1".into()));
        }
        Ok(Self {
            model,
            opts,
            state: None,
            recent: VecDeque::new(),
            t: 0,
        })
    }

    pub fn frames_seen(&self) -> usize {
        self.t
    }

    pub fn state(&self) -> Option<&DmrState<FeaturePyramid>> {
        self.state.as_ref()
    }

    pub fn push(&mut self, frame: &Tensor) -> Result<FrameResult> {
        let start = Instant::now();
        let (_, h, w) = frame.dims3()?;
        let t = self.t;
        let pyr = self.model.encode(frame)?;
        let cfg = &self.model.config;
        let mode = if self.opts.single_source {
            ReferenceMode::Single
        } else {
            ReferenceMode::Dual
        };
        let clip = match &self.state {
            None => vec![pyr.clone(); cfg.clip_len],
            Some(st) => {
                let recent: Vec<FeaturePyramid> = self.recent.iter().cloned().collect();
                assemble_clip(st, &recent, pyr.clone(), cfg.num_adjacent(), mode)?
            }
        };
        let pred = self.model.predict(&clip, (h, w))?;
        let entry = FrameEntry::new(t, pred.agg, &pred.coarse_prob, pyr.clone())?;
        let audit = match &mut self.state {
            None => {
                self.state = Some(DmrState::new(
                    t,
                    entry,
                    (self.opts.semantic_cooldown, self.opts.confidence_cooldown),
                )?);
                None
            }
            Some(_) if self.opts.no_dmr => None,
            Some(st) => Some(st.step(t, entry)?),
        };
        self.recent.push_back(pyr);
        while self.recent.len() > cfg.num_adjacent() {
            self.recent.pop_front();
        }
        self.t += 1;
        let (sem_frame, conf_frame) = self.state.as_ref().map(|s| s.slot_frames()).unwrap_or((0, 0));
        Ok(FrameResult {
            t,
            prob: pred.triple.final_prob(),
            triple: pred.triple,
            sem_frame,
            conf_frame,
            audit,
            latency: start.elapsed(),
        })
    }
}

/// Run a whole stream through a fresh session.
pub fn infer_stream(model: &Model, frames: &[Tensor], opts: StreamOptions) -> Result<Vec<FrameResult>> {
    if frames.is_empty() {
        return Err(Error::Empty("stream has no frames".into()));
    }
    let mut s = StreamSession::new(model, opts)?;
    frames.iter().map(|f| s.push(f)).collect()
}
