//! Training: AdamW over the summed three-head loss.
//!
//! Training clips use their first `R` frames as references. The learning
//! rate is constant.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clip::{role_layout, validate_roles, VideoClip};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kernels::sigmoid;
use crate::losses::LossReport;
use crate::metrics::dice;
use crate::model::Model;
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::synth::gen_clip;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// `p <- p - lr * wd * p`, then the bias-corrected Adam update.
    /// Parameters without a gradient entry get a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let g = grads.get(name).map(|t| t.data());
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                *x -= self.lr * self.weight_decay * *x;
                *x -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Loss, parameter gradients and final probability for one clip.
pub struct ClipGradients {
    pub loss: LossReport,
    pub grads: BTreeMap<String, Tensor>,
    pub final_prob: Tensor,
}

pub fn clip_gradients(model: &Model, clip: &VideoClip) -> Result<ClipGradients> {
    let gt = clip
        .current_mask()
        .ok_or_else(|| Error::Empty("clip without frames".into()))?;
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let (loss, report, f) = model.loss_graph(&mut g, &p, &clip.frames, gt)?;
    let final_prob = g.value(f.decode.pred3).map(sigmoid);
    let mut grads_all = g.backward(loss);
    let mut grads = BTreeMap::new();
    for (name, &v) in p.iter() {
        if let Some(t) = grads_all.take(v) {
            grads.insert(name.clone(), t);
        }
    }
    Ok(ClipGradients {
        loss: report,
        grads,
        final_prob,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub pred1: f64,
    pub pred2: f64,
    pub pred3: f64,
    /// Mean Dice of the final prediction on the batch, before the update.
    pub train_dice: f64,
    pub lr: f64,
    pub elapsed_s: f64,
}

pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub steps: usize,
}

impl Trainer {
    pub fn new(model: Model, lr: f64, weight_decay: f64) -> Self {
        Self {
            model,
            opt: AdamW::new(lr, weight_decay),
            steps: 0,
        }
    }

    /// One optimizer step on the batch-mean loss. A non-finite loss aborts
    /// before the parameters change.
    pub fn step(&mut self, batch: &[VideoClip]) -> Result<(LossReport, f64)> {
        if batch.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut reports = Vec::with_capacity(batch.len());
        let mut dice_sum = 0.0;
        for clip in batch {
            let cg = clip_gradients(&self.model, clip)?;
            if !cg.loss.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at step {}: {}",
                    self.steps,
                    serde_json::to_string(&cg.loss)?
                )));
            }
            dice_sum += dice(&cg.final_prob, clip.current_mask().expect("checked"))?;
            for (name, g) in cg.grads {
                let g = g.map(|v| v * scale);
                match sum.get_mut(&name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        sum.insert(name, g);
                    }
                }
            }
            reports.push(cg.loss);
        }
        if sum.values().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite(format!("gradient at step {}", self.steps)));
        }
        self.opt.step(&mut self.model.params, &sum);
        self.steps += 1;
        let mean = LossReport::mean(&reports).expect("non-empty batch");
        Ok((mean, dice_sum / batch.len() as f64))
    }
}

/// Seeds of the synthetic training clips.
pub fn training_clip_seeds(cfg: &RunConfig) -> Vec<u64> {
    let mut rng = SeededRng::derived(cfg.seed, 0x7A1);
    (0..cfg.train_clips).map(|_| rng.next_u64()).collect()
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub model: Model,
    pub steps: usize,
    pub last: Option<StepRecord>,
}

/// Clips visited by [`train_with`]: generated on demand or preloaded.
pub enum TrainData<'a> {
    Synthetic,
    Clips(&'a [VideoClip]),
}

/// Train on synthetic clips. See [`train_with`].
pub fn train(cfg: &RunConfig, log: &mut dyn Write) -> Result<TrainSummary> {
    train_with(cfg, TrainData::Synthetic, log)
}

/// Each epoch visits every training clip once in a seeded order. One JSON
/// line per step is written to `log`; on a non-finite loss a diagnostic
/// line is written and the error returned.
pub fn train_with(cfg: &RunConfig, data: TrainData<'_>, log: &mut dyn Write) -> Result<TrainSummary> {
    cfg.validate()?;
    let seeds = training_clip_seeds(cfg);
    let count = match data {
        TrainData::Synthetic => seeds.len(),
        TrainData::Clips(clips) => {
            let t = cfg.clip_len;
            if let Some(c) = clips.iter().find(|c| c.len() != t || c.num_references() != cfg.num_references) {
                return Err(Error::InvalidConfig(format!(
                    "training clip has {} frames and {} references, config wants {t} and {}",
                    c.len(),
                    c.num_references(),
                    cfg.num_references
                )));
            }
            clips.len()
        }
    };
    if count == 0 && cfg.epochs > 0 {
        return Err(Error::Empty("no training clips".into()));
    }
    let fetch = |i: usize| -> Result<VideoClip> {
        match data {
            TrainData::Synthetic => gen_clip(&cfg.synth_config(seeds[i])),
            TrainData::Clips(clips) => Ok(clips[i].clone()),
        }
    };
    let model = Model::init(cfg.model_config(), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.learning_rate, cfg.weight_decay);
    let start = Instant::now();
    let mut last = None;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..count).collect();
        SeededRng::derived(cfg.seed, 0x5EED + epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| trainer.steps >= m) {
                break 'epochs;
            }
            let batch = chunk.iter().map(|&i| fetch(i)).collect::<Result<Vec<_>>>()?;
            let (loss, train_dice) = match trainer.step(&batch) {
                Ok(v) => v,
                Err(e @ Error::NonFinite(_)) => {
                    let diag = serde_json::json!({
                        "event": "non_finite",
                        "step": trainer.steps,
                        "epoch": epoch,
                        "clips": chunk,
                        "detail": e.to_string(),
                    });
                    writeln!(log, "{diag}")?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let rec = StepRecord {
                step: trainer.steps,
                epoch,
                loss: loss.total,
                pred1: loss.pred1.sum(),
                pred2: loss.pred2.sum(),
                pred3: loss.pred3.sum(),
                train_dice,
                lr: cfg.learning_rate,
                elapsed_s: start.elapsed().as_secs_f64(),
            };
            writeln!(log, "{}", serde_json::to_string(&rec)?)?;
            last = Some(rec);
        }
    }
    Ok(TrainSummary {
        steps: trainer.steps,
        model: trainer.model,
        last,
    })
}

/// Cut a labelled stream into non-overlapping training clips of
/// `clip_len` frames whose first `num_references` frames are references.
/// A trailing remainder shorter than `clip_len` is dropped.
pub fn stream_windows(frames: &[Tensor], masks: &[Tensor], clip_len: usize, num_references: usize) -> Result<Vec<VideoClip>> {
    if frames.len() != masks.len() {
        return Err(Error::Shape(format!("{} frames but {} masks", frames.len(), masks.len())));
    }
    if clip_len == 0 {
        return Err(Error::InvalidConfig("clip length must be >= 1".into()));
    }
    let roles = role_layout(clip_len, num_references);
    validate_roles(&roles)?;
    Ok(frames
        .chunks_exact(clip_len)
        .zip(masks.chunks_exact(clip_len))
        .map(|(f, m)| VideoClip {
            frames: f.to_vec(),
            masks: m.to_vec(),
            roles: roles.clone(),
            timestamps: (0..clip_len).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthConfig;

    #[test]
    fn stream_windows_drop_the_remainder() {
        let f: Vec<Tensor> = (0..13).map(|i| Tensor::full(&[3, 32, 32], i as f64 / 13.0)).collect();
        let m: Vec<Tensor> = (0..13).map(|_| Tensor::zeros(&[32, 32])).collect();
        let w = stream_windows(&f, &m, 6, 2).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].frames[0], f[6]);
        assert_eq!(w[1].num_references(), 2);
        assert!(stream_windows(&f, &m[..3], 6, 2).is_err());
    }

    #[test]
    fn preloaded_clips_match_synthetic_training() {
        let cfg = tiny_cfg();
        let clips: Vec<VideoClip> = training_clip_seeds(&cfg)
            .into_iter()
            .map(|s| gen_clip(&cfg.synth_config(s)).unwrap())
            .collect();
        let a = train(&cfg, &mut std::io::sink()).unwrap();
        let b = train_with(&cfg, TrainData::Clips(&clips), &mut std::io::sink()).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert!(train_with(&cfg, TrainData::Clips(&clips[..1].iter().map(|c| VideoClip { roles: role_layout(6, 1), ..c.clone() }).collect::<Vec<_>>()), &mut std::io::sink()).is_err());
    }

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            image_size: 64,
            base_channels: 4,
            num_heads: 2,
            train_clips: 2,
            batch_size: 2,
            epochs: 1,
            ..RunConfig::default()
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(&[2], vec![0.5, -3.0]).unwrap());
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut p, &g);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[1], vec![2.0]).unwrap());
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut p, &BTreeMap::new());
        // zero gradient: only the decay term acts
        assert!((p.get("w").unwrap().data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = RunConfig { epochs: 0, ..tiny_cfg() };
        let mut log = Vec::new();
        let s = train(&cfg, &mut log).unwrap();
        assert_eq!(s.steps, 0);
        assert_eq!(s.model, Model::init(cfg.model_config(), cfg.seed).unwrap());
        assert!(log.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let cfg = tiny_cfg();
        let (mut l1, mut l2) = (Vec::new(), Vec::new());
        let a = train(&cfg, &mut l1).unwrap();
        let b = train(&cfg, &mut l2).unwrap();
        assert_eq!(a.model, b.model);
        let text = String::from_utf8(l1).unwrap();
        assert_eq!(text.lines().count(), 1);
        let rec: StepRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(rec.loss.is_finite());
    }

    #[test]
    fn loss_decreases_on_a_fixed_clip() {
        let cfg = tiny_cfg();
        let clip = gen_clip(&SynthConfig::default()).unwrap();
        let mut t = Trainer::new(Model::init(cfg.model_config(), 1).unwrap(), 3e-3, 0.0);
        let first = t.step(std::slice::from_ref(&clip)).unwrap().0.total;
        let mut last = first;
        for _ in 0..10 {
            last = t.step(std::slice::from_ref(&clip)).unwrap().0.total;
        }
        assert!(last < first, "{first} -> {last}");
    }
}
