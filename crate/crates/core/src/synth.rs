//! Deterministic synthetic video: one soft-edged ellipse per clip moving by
//! a bounded random walk with multiplicative area jitter, over a flat
//! background with additive Gaussian noise.
//!
//! Intensities: background `0.5 - contrast / 2`, blob core
//! `0.5 + contrast / 2`. The blob edge ramps linearly from background to
//! core over the outer [`EDGE_WIDTH`] of the normalized ellipse radius, so
//! every pixel outside the ellipse is exactly background before noise and
//! the mask marks exactly the pixels with normalized radius `<= 1`.
//! The gray frame is replicated to three channels.

use serde::{Deserialize, Serialize};

use crate::clip::{role_layout, VideoClip};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Fraction of the normalized radius used for the soft edge.
pub const EDGE_WIDTH: f64 = 0.25;
/// Blob area bounds as fractions of the frame area.
pub const MIN_AREA_FRAC: f64 = 0.02;
pub const MAX_AREA_FRAC: f64 = 0.20;
pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    /// Foreground-background intensity gap in `[0, 1]`.
    pub contrast: f64,
    /// Maximum centroid displacement per frame, in pixels.
    pub motion_amplitude: f64,
    /// Maximum relative area change per frame, in `[0, 1]`.
    pub scale_jitter: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default = "default_refs")]
    pub num_references: usize,
}

fn default_refs() -> usize {
    2
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_frames: 6,
            contrast: 0.4,
            motion_amplitude: 3.0,
            scale_jitter: 0.1,
            noise_sigma: 0.05,
            seed: 0,
            num_references: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.validate_frame()?;
        if self.num_frames < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_frames must be >= 2, got {}",
                self.num_frames
            )));
        }
        Ok(())
    }

    fn validate_frame(&self) -> Result<()> {
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v < 32 || v % 32 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be >= 32 and divisible by 32, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.contrast) {
            return Err(Error::InvalidConfig(format!("contrast {} not in [0, 1]", self.contrast)));
        }
        if !(0.0..=1.0).contains(&self.scale_jitter) {
            return Err(Error::InvalidConfig(format!(
                "scale_jitter {} not in [0, 1]",
                self.scale_jitter
            )));
        }
        if !(self.motion_amplitude >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("negative motion or noise".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Analytic blob geometry of one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobState {
    pub cy: f64,
    pub cx: f64,
    pub area: f64,
    pub aspect: f64,
    pub angle: f64,
}

impl BlobState {
    pub fn semi_axes(&self) -> (f64, f64) {
        let a = (self.area / std::f64::consts::PI * self.aspect).sqrt();
        let b = (self.area / std::f64::consts::PI / self.aspect).sqrt();
        (a, b)
    }

    /// Normalized elliptical radius of pixel centre `(y, x)`.
    pub fn radius_at(&self, y: usize, x: usize) -> f64 {
        let (a, b) = self.semi_axes();
        let (s, c) = self.angle.sin_cos();
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / a).powi(2) + (v / b).powi(2)).sqrt()
    }
}

/// Lazy frame-by-frame generator; frame `t` depends only on the seed and `t`.
#[derive(Clone, Debug)]
pub struct SynthStream {
    config: SynthConfig,
    remaining: usize,
    geometry_rng: SeededRng,
    noise_rng: SeededRng,
    blob: Option<BlobState>,
}

impl SynthStream {
    /// Most recent blob geometry (after at least one frame).
    pub fn blob(&self) -> Option<BlobState> {
        self.blob
    }

    fn next_blob(&mut self) -> BlobState {
        let (h, w) = (self.config.height as f64, self.config.width as f64);
        let frame_area = h * w;
        let rng = &mut self.geometry_rng;
        let blob = match self.blob {
            None => {
                let area = frame_area * rng.uniform_in(0.05, 0.12);
                let aspect = rng.uniform_in(0.6, 1.6);
                let angle = rng.uniform_in(0.0, std::f64::consts::PI);
                let mut b = BlobState {
                    cy: 0.0,
                    cx: 0.0,
                    area,
                    aspect,
                    angle,
                };
                let r = b.semi_axes().0.max(b.semi_axes().1);
                b.cy = rng.uniform_in(r.min(h / 2.0), (h - r).max(h / 2.0));
                b.cx = rng.uniform_in(r.min(w / 2.0), (w - r).max(w / 2.0));
                b
            }
            Some(prev) => {
                let jitter = self.config.scale_jitter * rng.uniform_in(-1.0, 1.0);
                let area = (prev.area * (1.0 + jitter))
                    .clamp(MIN_AREA_FRAC * frame_area, MAX_AREA_FRAC * frame_area);
                let step = self.config.motion_amplitude * rng.uniform();
                let dir = rng.uniform_in(0.0, std::f64::consts::TAU);
                let mut b = BlobState { area, ..prev };
                let r = b.semi_axes().0.max(b.semi_axes().1);
                // clamping toward the frame interior never lengthens the step
                b.cy = clamp_towards(prev.cy + step * dir.sin(), r, h - r, prev.cy);
                b.cx = clamp_towards(prev.cx + step * dir.cos(), r, w - r, prev.cx);
                b
            }
        };
        self.blob = Some(blob);
        blob
    }
}

/// Clamp `v` into `[lo, hi]`, but never past `prev` (keeps the move a
/// shortening of the proposed step even when `prev` is outside the range).
fn clamp_towards(v: f64, lo: f64, hi: f64, prev: f64) -> f64 {
    if lo > hi {
        return prev;
    }
    let c = v.clamp(lo, hi);
    if (c - prev).abs() > (v - prev).abs() {
        prev
    } else {
        c
    }
}

impl Iterator for SynthStream {
    type Item = (Tensor, Tensor);

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let blob = self.next_blob();
        let (h, w) = (self.config.height, self.config.width);
        let bg = 0.5 - self.config.contrast / 2.0;
        let fg = 0.5 + self.config.contrast / 2.0;
        let mut gray = vec![0.0; h * w];
        let mut mask = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let r = blob.radius_at(y, x);
                let alpha = if r <= 1.0 {
                    mask[y * w + x] = 1.0;
                    ((1.0 - r) / EDGE_WIDTH).min(1.0)
                } else {
                    0.0
                };
                let clean = bg + alpha * (fg - bg);
                let noise = if self.config.noise_sigma > 0.0 {
                    self.config.noise_sigma * self.noise_rng.normal()
                } else {
                    0.0
                };
                gray[y * w + x] = (clean + noise).clamp(0.0, 1.0);
            }
        }
        let mut rgb = Vec::with_capacity(INPUT_CHANNELS * h * w);
        for _ in 0..INPUT_CHANNELS {
            rgb.extend_from_slice(&gray);
        }
        Some((
            Tensor::new(&[INPUT_CHANNELS, h, w], rgb).expect("frame shape"),
            Tensor::new(&[h, w], mask).expect("mask shape"),
        ))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for SynthStream {}

/// Stream of `length` frames; frame `t` equals frame `t` of
/// [`gen_clip`] with the same config.
pub fn gen_stream(config: &SynthConfig, length: usize) -> Result<SynthStream> {
    config.validate_frame()?;
    if length == 0 {
        return Err(Error::InvalidConfig("stream length must be >= 1".into()));
    }
    Ok(SynthStream {
        config: config.clone(),
        remaining: length,
        geometry_rng: SeededRng::derived(config.seed, 1),
        noise_rng: SeededRng::derived(config.seed, 2),
        blob: None,
    })
}

/// Clip of `num_frames` frames with roles `reference^R adjacent* current`.
pub fn gen_clip(config: &SynthConfig) -> Result<VideoClip> {
    config.validate()?;
    let (frames, masks): (Vec<_>, Vec<_>) = gen_stream(config, config.num_frames)?.unzip();
    Ok(VideoClip {
        roles: role_layout(frames.len(), config.num_references),
        timestamps: (0..frames.len()).collect(),
        frames,
        masks,
    })
}

/// Blob geometry for each of the first `length` frames.
pub fn blob_track(config: &SynthConfig, length: usize) -> Result<Vec<BlobState>> {
    let mut s = gen_stream(config, length)?;
    let mut out = Vec::with_capacity(length);
    while s.next().is_some() {
        out.push(s.blob().expect("blob after frame"));
    }
    Ok(out)
}
