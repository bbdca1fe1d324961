//! Dynamic multi-source reference selection.
//!
//! Two reference slots are maintained during streaming inference:
//!
//! * semantic slot, scored by `s_sep + s_cons`, where
//!   `s_sep = 1 - cos(mu_fg, mu_bg)` of the frame itself and
//!   `s_cons = cos(mu_fg, mu_fg_current)`;
//! * confidence slot, scored by `c + s_cons`, with the determinacy
//!   `c = 1 - mean(H2(p))` and `H2` the binary entropy in bits.
//!
//! At step `t` the candidate is the frame completed at step `t - 1`. Its
//! full score and each slot's full score are evaluated against the current
//! frame's foreground prototype; the separability/determinacy part of a slot
//! is cached from when it was filled. A slot is replaced only when at least
//! `cooldown` steps have passed since its last update and the candidate
//! scores strictly higher.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard for pooling denominators and cosine norms.
pub const DMR_EPS: f64 = 1e-8;
pub const SEMANTIC_COOLDOWN: usize = 5;
pub const CONFIDENCE_COOLDOWN: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub mu_fg: Vec<f64>,
    pub mu_bg: Vec<f64>,
}

/// Probability-weighted foreground and background means of a `[C, H, W]`
/// feature grid: `sum(p f) / (sum(p) + eps)` and the same with `1 - p`.
pub fn compute_prototypes(feat: &Tensor, prob: &Tensor) -> Result<Prototypes> {
    let (c, h, w) = feat.dims3()?;
    if prob.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "probability map {:?} for feature {:?}",
            prob.shape(),
            feat.shape()
        )));
    }
    let n = h * w;
    let p = prob.data();
    let wf: f64 = p.iter().sum();
    let wb: f64 = p.iter().map(|v| 1.0 - v).sum();
    let mut mu_fg = vec![0.0; c];
    let mut mu_bg = vec![0.0; c];
    for ch in 0..c {
        let f = &feat.data()[ch * n..(ch + 1) * n];
        let (mut a, mut b) = (0.0, 0.0);
        for (fi, pi) in f.iter().zip(p) {
            a += pi * fi;
            b += (1.0 - pi) * fi;
        }
        mu_fg[ch] = a / (wf + DMR_EPS);
        mu_bg[ch] = b / (wb + DMR_EPS);
    }
    Ok(Prototypes { mu_fg, mu_bg })
}

/// Cosine similarity; zero (below `eps`) vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < DMR_EPS || nb < DMR_EPS {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticScore {
    pub s_sep: f64,
    pub s_cons: f64,
    pub score: f64,
}

pub fn separability(p: &Prototypes) -> f64 {
    1.0 - cosine(&p.mu_fg, &p.mu_bg)
}

pub fn consistency(cand: &Prototypes, cur: &Prototypes) -> f64 {
    cosine(&cand.mu_fg, &cur.mu_fg)
}

pub fn semantic_score(cand: &Prototypes, cur: &Prototypes) -> SemanticScore {
    let s_sep = separability(cand);
    let s_cons = consistency(cand, cur);
    SemanticScore {
        s_sep,
        s_cons,
        score: s_sep + s_cons,
    }
}

/// Binary entropy in bits with `0 log 0 = 0`.
pub fn binary_entropy_bits(p: f64) -> f64 {
    let term = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.log2() };
    term(p) + term(1.0 - p)
}

/// `1 - mean(H2(p))` over the map.
pub fn determinacy(prob: &Tensor) -> f64 {
    let n = prob.numel().max(1) as f64;
    1.0 - prob.data().iter().map(|&p| binary_entropy_bits(p)).sum::<f64>() / n
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceScore {
    pub c: f64,
    pub score: f64,
}

pub fn confidence_score(prob: &Tensor, cand: &Prototypes, cur: &Prototypes) -> ConfidenceScore {
    let c = determinacy(prob);
    ConfidenceScore {
        c,
        score: c + consistency(cand, cur),
    }
}

/// A scored frame: its aggregated feature, prototypes and the
/// current-frame-independent score parts, plus an opaque payload (for
/// example the frame's pyramid, needed to rebuild its token set).
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEntry<P> {
    pub frame: usize,
    pub feature: Tensor,
    pub prototypes: Prototypes,
    pub s_sep: f64,
    pub c: f64,
    pub payload: P,
}

impl<P> FrameEntry<P> {
    pub fn new(frame: usize, feature: Tensor, prob: &Tensor, payload: P) -> Result<Self> {
        let prototypes = compute_prototypes(&feature, prob)?;
        Ok(Self {
            frame,
            s_sep: separability(&prototypes),
            c: determinacy(prob),
            feature,
            prototypes,
            payload,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotKind {
    Semantic,
    Confidence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSlot<P> {
    pub kind: SlotKind,
    pub entry: FrameEntry<P>,
    pub last_update_t: usize,
    pub cooldown: usize,
}

impl<P> ReferenceSlot<P> {
    pub fn static_score(&self) -> f64 {
        static_part(self.kind, &self.entry)
    }
}

fn static_part<P>(kind: SlotKind, e: &FrameEntry<P>) -> f64 {
    match kind {
        SlotKind::Semantic => e.s_sep,
        SlotKind::Confidence => e.c,
    }
}

/// One step's decisions, written to the audit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepAudit {
    pub t: usize,
    pub candidate_frame: usize,
    pub sem_slot_score: f64,
    pub sem_candidate_score: f64,
    pub sem_gate_open: bool,
    pub sem_updated: bool,
    pub sem_frame: usize,
    pub conf_slot_score: f64,
    pub conf_candidate_score: f64,
    pub conf_gate_open: bool,
    pub conf_updated: bool,
    pub conf_frame: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DmrState<P> {
    pub sem_slot: ReferenceSlot<P>,
    pub conf_slot: ReferenceSlot<P>,
    pub candidate: FrameEntry<P>,
    pub last_t: usize,
}

impl<P: Clone> DmrState<P> {
    /// Both slots and the candidate start from the first frame at `t0`.
    pub fn new(t0: usize, first: FrameEntry<P>, cooldowns: (usize, usize)) -> Result<Self> {
        if cooldowns.0 == 0 || cooldowns.1 == 0 {
            return Err(Error::InvalidConfig("cooldowns must be >= 1".into()));
        }
        Ok(Self {
            sem_slot: ReferenceSlot {
                kind: SlotKind::Semantic,
                entry: first.clone(),
                last_update_t: t0,
                cooldown: cooldowns.0,
            },
            conf_slot: ReferenceSlot {
                kind: SlotKind::Confidence,
                entry: first.clone(),
                last_update_t: t0,
                cooldown: cooldowns.1,
            },
            candidate: first,
            last_t: t0,
        })
    }

    /// Score the pending candidate against the current frame, update slots,
    /// then make the current frame the next candidate.
    pub fn step(&mut self, t: usize, current: FrameEntry<P>) -> Result<StepAudit> {
        if t <= self.last_t {
            return Err(Error::NonMonotonicTime {
                prev: self.last_t,
                got: t,
            });
        }
        let cur = &current.prototypes;
        let cand = &self.candidate;
        let decide = |slot: &mut ReferenceSlot<P>| {
            let slot_score = slot.static_score() + consistency(&slot.entry.prototypes, cur);
            let cand_score = static_part(slot.kind, cand) + consistency(&cand.prototypes, cur);
            let gate = t - slot.last_update_t >= slot.cooldown;
            let update = gate && cand_score > slot_score;
            if update {
                slot.entry = cand.clone();
                slot.last_update_t = t;
            }
            (slot_score, cand_score, gate, update)
        };
        let (ss, cs, sg, su) = decide(&mut self.sem_slot);
        let (sc, cc, cg, cu) = decide(&mut self.conf_slot);
        let audit = StepAudit {
            t,
            candidate_frame: self.candidate.frame,
            sem_slot_score: ss,
            sem_candidate_score: cs,
            sem_gate_open: sg,
            sem_updated: su,
            sem_frame: self.sem_slot.entry.frame,
            conf_slot_score: sc,
            conf_candidate_score: cc,
            conf_gate_open: cg,
            conf_updated: cu,
            conf_frame: self.conf_slot.entry.frame,
        };
        self.candidate = current;
        self.last_t = t;
        Ok(audit)
    }

    /// Source frame indices of the semantic and confidence slots.
    pub fn slot_frames(&self) -> (usize, usize) {
        (self.sem_slot.entry.frame, self.conf_slot.entry.frame)
    }
}

/// Functional form of [`DmrState::step`].
pub fn dmr_step<P: Clone>(
    state: &DmrState<P>,
    cur_feat: &Tensor,
    cur_prob: &Tensor,
    t: usize,
    payload: P,
) -> Result<(DmrState<P>, StepAudit)> {
    let mut next = state.clone();
    let audit = next.step(t, FrameEntry::new(t, cur_feat.clone(), cur_prob, payload)?)?;
    Ok((next, audit))
}

/// How reference positions are filled from the slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReferenceMode {
    /// Semantic slot then confidence slot.
    Dual,
    /// Semantic slot in every reference position.
    Single,
}

/// Role-ordered clip `[sem, conf, adjacent..., current]`. The adjacent
/// buffer holds past frames oldest first; when it is shorter than
/// `num_adjacent` its oldest entry is repeated at the front.
pub fn assemble_clip<P: Clone>(
    state: &DmrState<P>,
    recent: &[P],
    current: P,
    num_adjacent: usize,
    mode: ReferenceMode,
) -> Result<Vec<P>> {
    let oldest = recent
        .first()
        .ok_or_else(|| Error::Empty("no past frames to fill the adjacent positions".into()))?;
    let mut out = Vec::with_capacity(num_adjacent + 3);
    out.push(state.sem_slot.entry.payload.clone());
    out.push(match mode {
        ReferenceMode::Dual => state.conf_slot.entry.payload.clone(),
        ReferenceMode::Single => state.sem_slot.entry.payload.clone(),
    });
    let take = recent.len().min(num_adjacent);
    for _ in take..num_adjacent {
        out.push(oldest.clone());
    }
    out.extend_from_slice(&recent[recent.len() - take..]);
    out.push(current);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn rand_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn prototypes_full_foreground() {
        let mut rng = SeededRng::new(1);
        let f = rand_tensor(&mut rng, &[3, 4, 4]);
        let p = compute_prototypes(&f, &Tensor::full(&[4, 4], 1.0)).unwrap();
        for c in 0..3 {
            let mean = f.narrow_rows(c, 1).unwrap().mean();
            assert!((p.mu_fg[c] - mean).abs() < 1e-8);
            assert_eq!(p.mu_bg[c], 0.0);
        }
    }

    #[test]
    fn prototypes_one_hot() {
        let mut rng = SeededRng::new(2);
        let f = rand_tensor(&mut rng, &[3, 4, 4]);
        let mut prob = Tensor::zeros(&[4, 4]);
        prob.data_mut()[6] = 1.0;
        let p = compute_prototypes(&f, &prob).unwrap();
        for c in 0..3 {
            assert!((p.mu_fg[c] - f.data()[c * 16 + 6]).abs() < 1e-7);
        }
    }

    #[test]
    fn prototypes_match_double_loop() {
        let mut rng = SeededRng::new(3);
        let f = rand_tensor(&mut rng, &[3, 4, 4]);
        let prob = Tensor::from_fn(&[4, 4], |_| rng.uniform());
        let p = compute_prototypes(&f, &prob).unwrap();
        for c in 0..3 {
            let (mut num, mut den, mut numb, mut denb) = (0.0, 0.0, 0.0, 0.0);
            for y in 0..4 {
                for x in 0..4 {
                    let pv = prob.data()[y * 4 + x];
                    num += pv * f.at3(c, y, x);
                    den += pv;
                    numb += (1.0 - pv) * f.at3(c, y, x);
                    denb += 1.0 - pv;
                }
            }
            assert!((p.mu_fg[c] - num / (den + 1e-8)).abs() < 1e-9);
            assert!((p.mu_bg[c] - numb / (denb + 1e-8)).abs() < 1e-9);
        }
        assert!(compute_prototypes(&f, &Tensor::zeros(&[4, 5])).is_err());
    }

    #[test]
    fn semantic_score_cases() {
        let same = Prototypes {
            mu_fg: vec![1.0, 2.0],
            mu_bg: vec![1.0, 2.0],
        };
        assert!(semantic_score(&same, &same).s_sep.abs() < 1e-15);
        let orth = Prototypes {
            mu_fg: vec![1.0, 0.0],
            mu_bg: vec![0.0, 3.0],
        };
        let s = semantic_score(&orth, &orth);
        assert!((s.score - 2.0).abs() < 1e-15);
    }

    #[test]
    fn semantic_score_matches_explicit_cosines() {
        let mut rng = SeededRng::new(4);
        let mk = |rng: &mut SeededRng| Prototypes {
            mu_fg: (0..8).map(|_| rng.normal()).collect(),
            mu_bg: (0..8).map(|_| rng.normal()).collect(),
        };
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        let cos = |x: &[f64], y: &[f64]| {
            let mut d = 0.0;
            let mut nx = 0.0;
            let mut ny = 0.0;
            for i in 0..8 {
                d += x[i] * y[i];
                nx += x[i] * x[i];
                ny += y[i] * y[i];
            }
            d / (nx.sqrt() * ny.sqrt())
        };
        let s = semantic_score(&a, &b);
        assert!((s.s_sep - (1.0 - cos(&a.mu_fg, &a.mu_bg))).abs() < 1e-9);
        assert!((s.s_cons - cos(&a.mu_fg, &b.mu_fg)).abs() < 1e-9);
    }

    #[test]
    fn zero_vector_cosine_is_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn determinacy_spot_values() {
        assert_eq!(determinacy(&Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap()), 1.0);
        assert_eq!(determinacy(&Tensor::full(&[3, 3], 0.5)), 0.0);
        let h = -0.9 * 0.9f64.log2() - 0.1 * 0.1f64.log2();
        assert!((determinacy(&Tensor::full(&[2, 2], 0.9)) - (1.0 - h)).abs() < 1e-12);
        assert!((1.0 - h - 0.531).abs() < 1e-3);
    }

    fn entry(frame: usize, fg: Vec<f64>, bg: Vec<f64>, c: f64) -> FrameEntry<()> {
        let prototypes = Prototypes { mu_fg: fg, mu_bg: bg };
        FrameEntry {
            frame,
            feature: Tensor::zeros(&[1, 1, 1]),
            s_sep: separability(&prototypes),
            prototypes,
            c,
            payload: (),
        }
    }

    #[test]
    fn cooldown_blocks_updates() {
        let first = entry(0, vec![1.0, 0.0], vec![1.0, 0.0], 0.0);
        let mut st = DmrState::new(0, first, (5, 1)).unwrap();
        // frame 1 is very separable and certain, becomes candidate at step 2
        st.step(1, entry(1, vec![1.0, 0.0], vec![-1.0, 0.0], 1.0)).unwrap();
        let a = st.step(2, entry(2, vec![1.0, 0.0], vec![1.0, 0.0], 0.0)).unwrap();
        assert!(!a.sem_gate_open && !a.sem_updated);
        assert!(a.conf_updated);
        assert_eq!(st.slot_frames(), (0, 1));
    }

    #[test]
    fn ties_keep_incumbent() {
        let e = |f| entry(f, vec![1.0, 1.0], vec![0.5, 2.0], 0.3);
        let mut st = DmrState::new(0, e(0), (1, 1)).unwrap();
        for t in 1..10 {
            let a = st.step(t, e(t)).unwrap();
            assert!(!a.sem_updated && !a.conf_updated);
        }
        assert_eq!(st.slot_frames(), (0, 0));
    }

    #[test]
    fn time_must_increase() {
        let e = entry(0, vec![1.0], vec![0.0], 0.0);
        let mut st = DmrState::new(3, e.clone(), (5, 1)).unwrap();
        assert!(matches!(st.step(3, e.clone()), Err(Error::NonMonotonicTime { .. })));
        assert!(DmrState::new(0, e, (0, 1)).is_err());
    }

    #[test]
    fn assemble_layout_and_padding() {
        let mk = |f: usize| FrameEntry {
            frame: f,
            feature: Tensor::zeros(&[1, 1, 1]),
            prototypes: Prototypes {
                mu_fg: vec![1.0],
                mu_bg: vec![0.0],
            },
            s_sep: 1.0,
            c: 0.0,
            payload: f,
        };
        let mut st = DmrState::new(0, mk(0), (5, 1)).unwrap();
        st.conf_slot.entry = mk(7);
        assert_eq!(
            assemble_clip(&st, &[0], 1, 3, ReferenceMode::Dual).unwrap(),
            vec![0, 7, 0, 0, 0, 1]
        );
        assert_eq!(
            assemble_clip(&st, &[3, 4, 5, 6, 8], 9, 3, ReferenceMode::Dual).unwrap(),
            vec![0, 7, 5, 6, 8, 9]
        );
        assert_eq!(
            assemble_clip(&st, &[3, 4], 9, 3, ReferenceMode::Single).unwrap(),
            vec![0, 0, 3, 3, 4, 9]
        );
        assert!(assemble_clip(&st, &[], 9, 3, ReferenceMode::Dual).is_err());
    }
}
