//! Run configuration shared by training and inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::stream::StreamOptions;
use crate::synth::SynthConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub no_cma: bool,
    pub no_dmr: bool,
    pub no_multiscale: bool,
    pub no_causal: bool,
    pub single_source: bool,
}

impl Ablation {
    /// Short label such as `full` or `no_cma+no_dmr`.
    pub fn label(&self) -> String {
        let names = [
            (self.no_cma, "no_cma"),
            (self.no_dmr, "no_dmr"),
            (self.no_multiscale, "no_multiscale"),
            (self.no_causal, "no_causal"),
            (self.single_source, "single_source"),
        ];
        let on: Vec<&str> = names.iter().filter(|(b, _)| *b).map(|(_, n)| *n).collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub num_heads: usize,
    pub clip_len: usize,
    pub num_references: usize,
    pub target_stage: usize,
    pub semantic_cooldown: usize,
    pub confidence_cooldown: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Synthetic clips per training epoch.
    pub train_clips: usize,
    /// Stop after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub ablation: Ablation,
    pub contrast: f64,
    pub motion_amplitude: f64,
    pub scale_jitter: f64,
    pub noise_sigma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            image_size: 352,
            base_channels: 32,
            num_heads: 4,
            clip_len: 6,
            num_references: 2,
            target_stage: 3,
            semantic_cooldown: 5,
            confidence_cooldown: 1,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 4,
            seed: 0,
            train_clips: 64,
            max_steps: None,
            ablation: Ablation::default(),
            contrast: s.contrast,
            motion_amplitude: s.motion_amplitude,
            scale_jitter: s.scale_jitter,
            noise_sigma: s.noise_sigma,
        }
    }
}

impl RunConfig {
    /// Small settings used by tests: 64x64 frames, `C = 8`.
    pub fn desk_scale() -> Self {
        Self {
            image_size: 64,
            base_channels: 8,
            num_heads: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_len <= self.num_references + 1 {
            return Err(Error::InvalidConfig(format!(
                "clip length {} must exceed references {} + 1",
                self.clip_len, self.num_references
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("learning rate must be > 0 and weight decay >= 0".into()));
        }
        if self.semantic_cooldown == 0 || self.confidence_cooldown == 0 {
            return Err(Error::InvalidConfig("cooldowns must be >= 1".into()));
        }
        self.model_config().validate()?;
        self.synth_config(0).validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            base_channels: self.base_channels,
            num_heads: self.num_heads,
            target_stage: self.target_stage,
            clip_len: self.clip_len,
            num_references: self.num_references,
            use_cma: !self.ablation.no_cma,
            multiscale: !self.ablation.no_multiscale,
            causal: !self.ablation.no_causal,
        }
    }

    pub fn stream_options(&self) -> StreamOptions {
        StreamOptions {
            semantic_cooldown: self.semantic_cooldown,
            confidence_cooldown: self.confidence_cooldown,
            no_dmr: self.ablation.no_dmr,
            single_source: self.ablation.single_source,
        }
    }

    pub fn synth_config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            height: self.image_size,
            width: self.image_size,
            num_frames: self.clip_len,
            contrast: self.contrast,
            motion_amplitude: self.motion_amplitude,
            scale_jitter: self.scale_jitter,
            noise_sigma: self.noise_sigma,
            seed,
            num_references: self.num_references,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.weight_decay, 1e-4);
        assert_eq!((c.epochs, c.batch_size, c.base_channels, c.num_heads), (30, 4, 32, 4));
        assert_eq!((c.image_size, c.clip_len, c.num_references, c.target_stage), (352, 6, 2, 3));
        assert_eq!((c.semantic_cooldown, c.confidence_cooldown), (5, 1));
        c.validate().unwrap();
    }

    #[test]
    fn clip_must_exceed_references() {
        let c = RunConfig {
            clip_len: 3,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"epochs": 2, "ablation": {"no_cma": true}}"#).unwrap();
        assert_eq!(c.epochs, 2);
        assert!(c.ablation.no_cma && !c.ablation.no_dmr);
        assert_eq!(c.ablation.label(), "no_cma");
        assert!(!c.model_config().use_cma);
    }
}
