//! Property and oracle measurements behind the `check` command and the
//! acceptance tests. Each function returns raw measurements; callers apply
//! thresholds.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clip::role_layout;
use crate::cma::{cma_forward, init_cma, visible_frames, CmaConfig};
use crate::dmr::{compute_prototypes, confidence_score, semantic_score, DmrState, FrameEntry, Prototypes};
use crate::encoder::{encode_clip, init_encoder, stage_shape, FeaturePyramid, NUM_STAGES};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::losses::{dice_loss, seg_loss, total_loss, LOSS_EPS};
use crate::metrics::{frame_metrics, mae};
use crate::model::{Model, ModelConfig};
use crate::oracles::{dmr_oracle, finite_diff_coords, masked_dense_attention, VisibilityMask};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::synth::{gen_clip, SynthConfig};
use crate::tensor::Tensor;

/// Pyramid of standard-normal features with the stage shapes of an
/// `h x w` input.
pub fn random_pyramid(rng: &mut SeededRng, base_channels: usize, h: usize, w: usize) -> FeaturePyramid {
    FeaturePyramid {
        stages: std::array::from_fn(|s| Tensor::from_fn(&stage_shape(s, base_channels, h, w), |_| rng.normal())),
        base_channels,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CausalityMeasure {
    /// Frames that may ignore the perturbed frame but changed.
    pub violations: usize,
    /// (perturbed, observer) pairs where bit-identity was required.
    pub checked: usize,
    /// Frames that see the perturbed frame and did change.
    pub responsive: usize,
}

/// Encode a synthetic clip, then for each frame `j` add noise to its pixels
/// and compare every frame's aggregated output bitwise.
pub fn causality(seed: u64, size: usize, base_channels: usize, clip_len: usize, refs: usize) -> Result<CausalityMeasure> {
    let enc = init_encoder(seed, base_channels)?;
    let cfg = CmaConfig::new(base_channels, 4.min(base_channels));
    let params = init_cma(seed, &cfg)?;
    let synth = SynthConfig {
        height: size,
        width: size,
        num_frames: clip_len,
        num_references: refs,
        ..SynthConfig::default()
    }
    .with_seed(seed);
    let clip = gen_clip(&synth)?;
    let roles = role_layout(clip_len, refs);
    let base_pyr = encode_clip(&clip.frames, &enc)?;
    let base = cma_forward(&base_pyr, &roles, &params, &cfg)?;
    let mut rng = SeededRng::derived(seed, 0xCA5);
    let mut m = CausalityMeasure::default();
    for j in 0..clip_len {
        let mut frames = clip.frames.clone();
        for v in frames[j].data_mut() {
            *v += 0.1 * rng.normal();
        }
        let mut pyr = base_pyr.clone();
        pyr[j] = encode_clip(&frames[j..=j], &enc)?.remove(0);
        let out = cma_forward(&pyr, &roles, &params, &cfg)?;
        for t in 0..clip_len {
            let sees = visible_frames(&roles, t, true)?.contains(&j);
            if sees {
                m.responsive += (out[t] != base[t]) as usize;
            } else {
                m.checked += 1;
                m.violations += (out[t] != base[t]) as usize;
            }
        }
    }
    Ok(m)
}

/// Max abs deviation between the per-frame aggregation and the dense
/// masked oracle over `clips` random clips. Pyramids have the stage shapes
/// of an `input x input` frame.
pub fn dense_equivalence(seed: u64, clips: usize, base_channels: usize, input: usize, clip_len: usize, refs: usize) -> Result<f64> {
    let cfg = CmaConfig::new(base_channels, 2);
    let mut rng = SeededRng::derived(seed, 0xDE5);
    let roles = role_layout(clip_len, refs);
    let ts: Vec<f64> = (0..clip_len).map(|i| i as f64).collect();
    let mut worst = 0.0f64;
    for c in 0..clips {
        let params = init_cma(seed.wrapping_add(c as u64), &cfg)?;
        let pyrs: Vec<_> = (0..clip_len).map(|_| random_pyramid(&mut rng, base_channels, input, input)).collect();
        let n = {
            let s = &pyrs[0].stages[cfg.target_stage];
            s.shape()[1] * s.shape()[2]
        };
        let mask = VisibilityMask::from_roles(&roles, &ts, n, true);
        let dense = masked_dense_attention(&pyrs, &roles, &mask, &params, &cfg)?;
        let fast = cma_forward(&pyrs, &roles, &params, &cfg)?;
        for (a, b) in dense.iter().zip(&fast) {
            worst = worst.max(a.max_abs_diff(b));
        }
    }
    Ok(worst)
}

/// Denominator floor for gradient relative errors, so that tensors whose
/// true gradient vanishes are judged by absolute error.
pub const GRAD_NORM_FLOOR: f64 = 1e-6;

/// Central-difference step.
pub const GRAD_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub name: String,
    pub coords: usize,
    pub analytic_norm: f64,
    pub rel_err: f64,
}

/// Compare analytic gradients with central differences on up to
/// `per_tensor` sampled coordinates of each named tensor. The relative
/// error is `|a - n| / max(|a|, |n|, floor)` over the sampled coordinates.
pub fn compare_gradients(
    params: &ParamStore,
    names: &[String],
    analytic: &BTreeMap<String, Tensor>,
    loss: &dyn Fn(&ParamStore) -> f64,
    eps: f64,
    per_tensor: usize,
    rng: &mut SeededRng,
) -> Result<Vec<GradRow>> {
    let mut rows = Vec::new();
    for name in names {
        let t = params.get(name)?;
        let n = t.numel();
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.index(n)).collect()
        };
        let zero = Tensor::zeros(t.shape());
        let a = analytic.get(name).unwrap_or(&zero);
        let shape = t.shape().to_vec();
        let numeric = finite_diff_coords(
            |x| {
                let mut p = params.clone();
                p.insert(name.clone(), Tensor::new(&shape, x.to_vec()).expect("same shape"));
                loss(&p)
            },
            t.data(),
            eps,
            &coords,
        )?;
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for (&i, &g) in coords.iter().zip(&numeric) {
            diff += (a.data()[i] - g).powi(2);
            na += a.data()[i].powi(2);
            nn += g * g;
        }
        let denom = na.sqrt().max(nn.sqrt()).max(GRAD_NORM_FLOOR);
        rows.push(GradRow {
            name: name.clone(),
            coords: coords.len(),
            analytic_norm: na.sqrt(),
            rel_err: diff.sqrt() / denom,
        });
    }
    Ok(rows)
}

fn circle_mask(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = ((i / w) as f64 / h as f64 - 0.45, (i % w) as f64 / w as f64 - 0.55);
        (y * y + x * x < 0.09) as u8 as f64
    })
}

/// Gradient check of the summed loss through decoder and aggregation, from
/// random pyramids whose target grid is `grid x grid`.
pub fn decoder_cma_gradients(seed: u64, frames: usize, grid: usize, base_channels: usize, per_tensor: usize, eps: f64) -> Result<Vec<GradRow>> {
    let input = grid * 32;
    let model = Model::init(
        ModelConfig {
            base_channels,
            num_heads: 2,
            clip_len: frames,
            num_references: 2,
            ..ModelConfig::default()
        },
        seed,
    )?;
    let mut rng = SeededRng::derived(seed, 0x6AD);
    let pyrs: Vec<_> = (0..frames).map(|_| random_pyramid(&mut rng, base_channels, input, input)).collect();
    let gt = circle_mask(input, input);
    let loss_of = |p: &ParamStore| -> Result<(f64, BTreeMap<String, Tensor>)> {
        let m = Model {
            config: model.config.clone(),
            params: p.clone(),
        };
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let pv: Vec<[Var; NUM_STAGES]> = pyrs.iter().map(|pyr| pyr.stages.clone().map(|t| g.leaf(t))).collect();
        let (l, _, _) = m.pyramid_loss_graph(&mut g, &bound, &pv, &gt)?;
        let mut grads = g.backward(l);
        let mut out = BTreeMap::new();
        for (name, &v) in bound.iter() {
            if let Some(t) = grads.take(v) {
                out.insert(name.clone(), t);
            }
        }
        Ok((g.value(l).item(), out))
    };
    let (_, analytic) = loss_of(&model.params)?;
    let names: Vec<String> = model.params.names().filter(|n| !n.starts_with("encoder.")).cloned().collect();
    let eval = |p: &ParamStore| loss_of(p).map(|r| r.0).unwrap_or(f64::NAN);
    compare_gradients(&model.params, &names, &analytic, &eval, eps, per_tensor, &mut rng)
}

/// Gradient check of the full network (encoder included) on raw frames.
pub fn full_model_gradients(seed: u64, size: usize, frames: usize, base_channels: usize, per_tensor: usize, eps: f64) -> Result<Vec<GradRow>> {
    let model = Model::init(
        ModelConfig {
            base_channels,
            num_heads: 2,
            clip_len: frames,
            num_references: 2,
            ..ModelConfig::default()
        },
        seed,
    )?;
    let clip = gen_clip(&SynthConfig {
        height: size,
        width: size,
        num_frames: frames,
        ..SynthConfig::default()
    })?;
    let gt = clip.current_mask().expect("non-empty").clone();
    let loss_of = |p: &ParamStore| -> Result<(f64, BTreeMap<String, Tensor>)> {
        let m = Model {
            config: model.config.clone(),
            params: p.clone(),
        };
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let (l, _, _) = m.loss_graph(&mut g, &bound, &clip.frames, &gt)?;
        let mut grads = g.backward(l);
        let mut out = BTreeMap::new();
        for (name, &v) in bound.iter() {
            if let Some(t) = grads.take(v) {
                out.insert(name.clone(), t);
            }
        }
        Ok((g.value(l).item(), out))
    };
    let (_, analytic) = loss_of(&model.params)?;
    let names: Vec<String> = model.params.names().cloned().collect();
    let eval = |p: &ParamStore| loss_of(p).map(|r| r.0).unwrap_or(f64::NAN);
    let mut rng = SeededRng::derived(seed, 0x6AE);
    compare_gradients(&model.params, &names, &analytic, &eval, eps, per_tensor, &mut rng)
}

/// Random `(feature, prob)` stream for selection tests.
pub fn random_dmr_stream(rng: &mut SeededRng, steps: usize, channels: usize, h: usize, w: usize) -> Vec<(Tensor, Tensor)> {
    (0..steps)
        .map(|_| {
            let f = Tensor::from_fn(&[channels, h, w], |_| rng.normal());
            let sharp = rng.uniform_in(0.5, 6.0);
            let p = Tensor::from_fn(&[h, w], |_| crate::kernels::sigmoid(sharp * rng.normal()));
            (f, p)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DmrMeasure {
    pub steps: usize,
    pub mismatches: usize,
    pub updates: usize,
}

/// Incremental selection against the replaying oracle on random streams.
pub fn dmr_equivalence(seed: u64, streams: usize, steps: usize, cooldowns: (usize, usize)) -> Result<DmrMeasure> {
    let mut rng = SeededRng::derived(seed, 0xD3);
    let mut m = DmrMeasure::default();
    for _ in 0..streams {
        let stream = random_dmr_stream(&mut rng, steps, 6, 3, 3);
        let expect = dmr_oracle(&stream, cooldowns);
        let mut state = DmrState::new(0, FrameEntry::new(0, stream[0].0.clone(), &stream[0].1, ())?, cooldowns)?;
        let mut got = vec![state.slot_frames()];
        for (t, (f, p)) in stream.iter().enumerate().skip(1) {
            let a = state.step(t, FrameEntry::new(t, f.clone(), p, ())?)?;
            m.updates += a.sem_updated as usize + a.conf_updated as usize;
            got.push(state.slot_frames());
        }
        m.steps += steps;
        m.mismatches += got.iter().zip(&expect).filter(|(a, b)| a != b).count();
    }
    Ok(m)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundsMeasure {
    pub draws: usize,
    pub violations: usize,
}

/// Random prototypes and probability maps, including degenerate zero and
/// constant cases, checked against the score ranges.
pub fn score_bounds(seed: u64, draws: usize) -> Result<BoundsMeasure> {
    let mut rng = SeededRng::derived(seed, 0xB0);
    let mut m = BoundsMeasure { draws, violations: 0 };
    for i in 0..draws {
        let c = 1 + rng.index(8);
        let scale = 10f64.powf(rng.uniform_in(-3.0, 3.0));
        let vec = |rng: &mut SeededRng| -> Vec<f64> {
            if i % 17 == 0 {
                vec![0.0; c]
            } else {
                (0..c).map(|_| scale * rng.normal()).collect()
            }
        };
        let cand = Prototypes {
            mu_fg: vec(&mut rng),
            mu_bg: vec(&mut rng),
        };
        let cur = Prototypes {
            mu_fg: vec(&mut rng),
            mu_bg: vec(&mut rng),
        };
        let n = 1 + rng.index(16);
        let prob = match i % 5 {
            0 => Tensor::from_fn(&[1, n], |_| (rng.uniform() < 0.5) as u8 as f64),
            1 => Tensor::full(&[1, n], 0.5),
            _ => Tensor::from_fn(&[1, n], |_| rng.uniform()),
        };
        let s = semantic_score(&cand, &cur);
        let cf = confidence_score(&prob, &cand, &cur);
        let ok = (0.0..=2.0).contains(&s.s_sep)
            && (-1.0..=1.0).contains(&s.s_cons)
            && (-1.0..=3.0).contains(&s.score)
            && (-1.0..=2.0).contains(&cf.score)
            && (0.0..=1.0).contains(&cf.c);
        m.violations += !ok as usize;
        // pooling path as well
        let f = Tensor::from_fn(&[c, 1, n], |_| scale * rng.normal());
        let pr = compute_prototypes(&f, &prob)?;
        let s2 = semantic_score(&pr, &cur);
        m.violations += !((0.0..=2.0).contains(&s2.s_sep) && (-1.0..=3.0).contains(&s2.score)) as usize;
    }
    Ok(m)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSanity {
    pub dice_self_max: f64,
    pub dice_complement_min: f64,
    /// `|total - sum of per-head losses|`, maximum over trials.
    pub additivity_err: f64,
}

pub fn loss_sanity(seed: u64, trials: usize) -> Result<LossSanity> {
    let mut rng = SeededRng::derived(seed, 0x1055);
    let mut s = LossSanity {
        dice_complement_min: f64::INFINITY,
        ..Default::default()
    };
    for _ in 0..trials {
        let (h, w) = (4 + rng.index(28), 4 + rng.index(28));
        let p = rng.uniform_in(0.05, 0.95);
        let g = Tensor::from_fn(&[h, w], |_| (rng.uniform() < p) as u8 as f64);
        s.dice_self_max = s.dice_self_max.max(dice_loss(&g, &g)?);
        s.dice_complement_min = s.dice_complement_min.min(dice_loss(&g.map(|v| 1.0 - v), &g)?);
        let logits: [Tensor; 3] = std::array::from_fn(|_| Tensor::from_fn(&[h, w], |_| 3.0 * rng.normal()));
        let triple = crate::decoder::PredictionTriple {
            pred1: logits[0].clone(),
            pred2: logits[1].clone(),
            pred3: logits[2].clone(),
        };
        let total = total_loss(&triple, &g)?.total;
        let parts: f64 = logits.iter().map(|l| seg_loss(l, &g).map(|t| t.sum())).sum::<Result<f64>>()?;
        s.additivity_err = s.additivity_err.max((total - parts).abs());
    }
    Ok(s)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSanity {
    /// Largest distance of any metric from its optimum on perfect predictions.
    pub perfect_max_dev: f64,
    pub mae_symmetry_max_err: f64,
}

pub fn metric_sanity(seed: u64, pairs: usize) -> Result<MetricSanity> {
    let mut rng = SeededRng::derived(seed, 0x3E7);
    let mut s = MetricSanity::default();
    let mut masks = vec![circle_mask(40, 48), Tensor::zeros(&[12, 12]), Tensor::full(&[12, 12], 1.0)];
    for _ in 0..5 {
        let p = rng.uniform_in(0.1, 0.9);
        masks.push(Tensor::from_fn(&[24, 20], |_| (rng.uniform() < p) as u8 as f64));
    }
    for g in &masks {
        let r = frame_metrics(g, g)?;
        for v in [r.dice, r.iou, r.s_measure, r.e_measure_mean, r.weighted_f] {
            s.perfect_max_dev = s.perfect_max_dev.max((1.0 - v).abs());
        }
        s.perfect_max_dev = s.perfect_max_dev.max(r.mae.abs());
    }
    for _ in 0..pairs {
        let (h, w) = (2 + rng.index(30), 2 + rng.index(30));
        let pred = Tensor::from_fn(&[h, w], |_| rng.uniform());
        let g = Tensor::from_fn(&[h, w], |_| (rng.uniform() < 0.5) as u8 as f64);
        let a = mae(&pred, &g)?;
        let b = mae(&pred.map(|v| 1.0 - v), &g.map(|v| 1.0 - v))?;
        s.mae_symmetry_max_err = s.mae_symmetry_max_err.max((a - b).abs());
    }
    Ok(s)
}

/// Number of (size, width) combinations whose encoded pyramid has the
/// wrong stage shapes.
pub fn shape_law(sizes: &[usize], widths: &[usize], seed: u64) -> Result<usize> {
    let mut bad = 0;
    for &c in widths {
        let enc = init_encoder(seed, c)?;
        for &s in sizes {
            let mut rng = SeededRng::new(seed);
            let frames: Vec<Tensor> = (0..2).map(|_| Tensor::from_fn(&[3, s, s], |_| rng.uniform())).collect();
            for p in encode_clip(&frames, &enc)? {
                bad += p.check_shapes(s, s).is_err() as usize;
            }
        }
    }
    Ok(bad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: serde_json::Value,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub passed: bool,
    pub suites: Vec<SuiteResult>,
}

fn suite(name: &str, f: impl FnOnce() -> Result<(bool, serde_json::Value)>) -> SuiteResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(v) => v,
        Err(e) => (false, serde_json::json!({ "error": e.to_string() })),
    };
    SuiteResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// The oracle and property suites at reduced sizes.
pub fn run_checks(seed: u64) -> CheckReport {
    let j = |v: &dyn erased::Ser| v.to_json();
    let suites = vec![
        suite("causality", || {
            let m = causality(seed, 64, 8, 6, 2)?;
            Ok((m.violations == 0 && m.responsive > 0, j(&m)))
        }),
        suite("dense_equivalence", || {
            let d = dense_equivalence(seed, 2, 4, 256, 6, 2)?;
            Ok((d < 1e-6, serde_json::json!({ "max_abs_dev": d })))
        }),
        suite("gradients", || {
            let rows = decoder_cma_gradients(seed, 4, 4, 4, 3, GRAD_EPS)?;
            let worst = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
            Ok((worst < 1e-4, serde_json::json!({ "tensors": rows.len(), "max_rel_err": worst })))
        }),
        suite("dmr_oracle", || {
            let m = dmr_equivalence(seed, 4, 50, (5, 1))?;
            Ok((m.mismatches == 0, j(&m)))
        }),
        suite("determinacy", || {
            use crate::dmr::determinacy;
            let bin = determinacy(&Tensor::new(&[1, 4], vec![0.0, 1.0, 1.0, 0.0])?);
            let half = determinacy(&Tensor::full(&[3, 3], 0.5));
            let h = -(0.9f64 * 0.9f64.log2() + 0.1 * 0.1f64.log2());
            let p9 = determinacy(&Tensor::full(&[2, 2], 0.9));
            let ok = bin == 1.0 && half == 0.0 && (p9 - (1.0 - h)).abs() < 1e-9;
            Ok((ok, serde_json::json!({ "binary": bin, "uniform_half": half, "const_0_9": p9 })))
        }),
        suite("score_bounds", || {
            let m = score_bounds(seed, 2000)?;
            Ok((m.violations == 0, j(&m)))
        }),
        suite("loss_sanity", || {
            let s = loss_sanity(seed, 20)?;
            let ok = s.dice_self_max <= LOSS_EPS && s.dice_complement_min >= 1.0 - LOSS_EPS && s.additivity_err == 0.0;
            Ok((ok, j(&s)))
        }),
        suite("metric_sanity", || {
            let s = metric_sanity(seed, 100)?;
            Ok((s.perfect_max_dev < 1e-6 && s.mae_symmetry_max_err < 1e-12, j(&s)))
        }),
        suite("shape_law", || {
            let bad = shape_law(&[64, 128], &[8], seed)?;
            Ok((bad == 0, serde_json::json!({ "bad": bad })))
        }),
    ];
    CheckReport {
        passed: suites.iter().all(|s| s.passed),
        suites,
    }
}

mod erased {
    pub trait Ser {
        fn to_json(&self) -> serde_json::Value;
    }
    impl<T: serde::Serialize> Ser for T {
        fn to_json(&self) -> serde_json::Value {
            serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_checks_pass() {
        let r = run_checks(3);
        for s in &r.suites {
            assert!(s.passed, "{}: {}", s.name, s.detail);
        }
    }

    #[test]
    fn gradient_rows_flag_a_wrong_gradient() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let mut wrong = BTreeMap::new();
        wrong.insert("w".to_string(), Tensor::new(&[2], vec![2.0, 0.0]).unwrap());
        let loss = |q: &ParamStore| q.get("w").unwrap().data().iter().map(|v| v * v).sum::<f64>();
        let mut rng = SeededRng::new(0);
        let rows = compare_gradients(&p, &["w".to_string()], &wrong, &loss, 1e-5, 4, &mut rng).unwrap();
        assert!(rows[0].rel_err > 0.1);
        let mut right = BTreeMap::new();
        right.insert("w".to_string(), Tensor::new(&[2], vec![2.0, 4.0]).unwrap());
        let rows = compare_gradients(&p, &["w".to_string()], &right, &loss, 1e-5, 4, &mut rng).unwrap();
        assert!(rows[0].rel_err < 1e-8);
    }
}
