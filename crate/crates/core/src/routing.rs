//! Unified inference: per-branch class scores, prototype cue, argmax
//! routing, per-task MSP acceptance and the fused zero-shot extension.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::encoder::encode_image;
use crate::error::{input, state_err, Error, Result};
use crate::ids::{ClassId, TaskId};
use crate::numerics::{RealMatrix, RealVector};
use crate::scalar::Scalar;
use crate::state::ModelState;
use crate::synthdata::TaskDataset;
use crate::training::HyperParams;

/// Offset subtracted from the calibration quantile so that the quantile
/// sample itself passes the strict `m_t > ω_t` test.
pub const THRESHOLD_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore<T> {
    pub task: TaskId,
    /// Text cosine `⟨v^t, t_c⟩`.
    pub s: T,
    /// Compensation logit.
    pub g: T,
    /// Prototype similarity `⟨v^t, p_c⟩`.
    pub proto: T,
    /// `s + β·g + γ·proto`.
    pub q: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown<T> {
    pub classes: BTreeMap<ClassId, ClassScore<T>>,
    /// Per-task maximum softmax probability over that task's `q` scores.
    pub msp: BTreeMap<TaskId, T>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ThresholdBank<T> {
    pub thresholds: BTreeMap<TaskId, T>,
}

/// Softmax of `xs` (max-shifted).
pub fn softmax<T: Scalar>(xs: &[T]) -> Vec<T> {
    let m = xs.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<T> = xs.iter().map(|&x| (x - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Maximum softmax probability of a score list.
pub fn msp<T: Scalar>(scores: &[T]) -> T {
    softmax(scores).into_iter().fold(T::zero(), T::max)
}

/// Precomputed per-state inference context: text features of all seen
/// classes and effective compensation heads.
pub struct Scorer<'a, T> {
    state: &'a ModelState<T>,
    beta: T,
    gamma: T,
    text: BTreeMap<ClassId, RealVector<T>>,
    heads: BTreeMap<TaskId, RealMatrix<T>>,
}

impl<'a, T: Scalar> Scorer<'a, T> {
    /// Compensation heads are required only when `beta ≠ 0`.
    pub fn new(state: &'a ModelState<T>, beta: f64, gamma: f64) -> Result<Self> {
        if state.num_tasks() == 0 {
            return state_err("no task has been learned");
        }
        let text = state.text_features(&state.seen_classes())?;
        let mut heads = BTreeMap::new();
        for t in state.learned_tasks() {
            match (state.heads.get(&t), state.subspaces.get(&t)) {
                (Some(h), Some(s)) => {
                    heads.insert(t, h.effective(s)?);
                }
                _ if beta != 0.0 => return state_err(format!("missing compensation head for {t}")),
                _ => {}
            }
        }
        Ok(Self { state, beta: T::of(beta), gamma: T::of(gamma), text, heads })
    }

    pub fn from_hp(state: &'a ModelState<T>, hp: &HyperParams) -> Result<Self> {
        Self::new(state, hp.beta, hp.gamma)
    }

    pub fn with_weights(&self, beta: f64, gamma: f64) -> Result<Self> {
        if beta != 0.0 && self.heads.len() != self.state.num_tasks() {
            return state_err("missing compensation head for a nonzero beta");
        }
        Ok(Self { state: self.state, beta: T::of(beta), gamma: T::of(gamma), text: self.text.clone(), heads: self.heads.clone() })
    }

    pub fn text_features(&self) -> &BTreeMap<ClassId, RealVector<T>> {
        &self.text
    }

    /// Unit feature of `x` through each learned task's visual adapter.
    pub fn branch_features(&self, x: &RealVector<T>) -> Result<BTreeMap<TaskId, RealVector<T>>> {
        self.state
            .visual_adapters
            .iter()
            .map(|(&t, ad)| Ok((t, encode_image(x, &self.state.encoder, ad)?)))
            .collect()
    }

    pub fn score(&self, x: &RealVector<T>) -> Result<ScoreBreakdown<T>> {
        let feats = self.branch_features(x)?;
        self.score_features(&feats)
    }

    /// Scores from precomputed branch features.
    pub fn score_features(&self, feats: &BTreeMap<TaskId, RealVector<T>>) -> Result<ScoreBreakdown<T>> {
        let mut classes = BTreeMap::new();
        let mut msps = BTreeMap::new();
        for (&t, v) in feats {
            let cs = self.state.classes_of(t)?;
            let g = match self.heads.get(&t) {
                Some(w) => w.tr_matvec(v).0,
                None => vec![T::zero(); cs.len()],
            };
            if g.len() != cs.len() {
                return state_err(format!("compensation head of {t} does not match its class set"));
            }
            let mut qs = Vec::with_capacity(cs.len());
            for (k, &c) in cs.iter().enumerate() {
                let s = v.dot(&self.text[&c]);
                let p = self
                    .state
                    .prototypes
                    .get(c)
                    .ok_or_else(|| Error::State(format!("missing prototype for {c}")))?;
                let proto = v.dot(p);
                let q = s + self.beta * g[k] + self.gamma * proto;
                qs.push(q);
                classes.insert(c, ClassScore { task: t, s, g: g[k], proto, q });
            }
            msps.insert(t, msp(&qs));
        }
        Ok(ScoreBreakdown { classes, msp: msps })
    }
}

/// Full score breakdown of one input under `hp.beta` / `hp.gamma`.
pub fn score_all<T: Scalar>(x: &RealVector<T>, state: &ModelState<T>, hp: &HyperParams) -> Result<ScoreBreakdown<T>> {
    Scorer::from_hp(state, hp)?.score(x)
}

/// Argmax of `q` over all scored classes; ties go to the lowest class id.
pub fn predict<T: Scalar>(bd: &ScoreBreakdown<T>) -> ClassId {
    let mut best: Option<(ClassId, T)> = None;
    for (&c, s) in &bd.classes {
        if best.is_none_or(|(_, q)| s.q > q) {
            best = Some((c, s.q));
        }
    }
    best.expect("breakdown has at least one class").0
}

/// Nearest-rank quantile of a sample.
pub fn nearest_rank_quantile<T: Scalar>(values: &[T], q: f64) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let k = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[k - 1])
}

/// Per-task acceptance thresholds from each task's own validation samples:
/// the `q`-quantile of that task's MSP, minus [`THRESHOLD_EPS`].
pub fn calibrate_thresholds<T: Scalar>(
    tasks: &[TaskDataset<T>],
    state: &ModelState<T>,
    hp: &HyperParams,
    q: f64,
) -> Result<ThresholdBank<T>> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::Calibration(format!("quantile {q} not in [0,1)")));
    }
    let scorer = Scorer::from_hp(state, hp)?;
    let mut thresholds = BTreeMap::new();
    for t in state.learned_tasks() {
        let task = tasks
            .iter()
            .find(|d| d.task_id == t)
            .ok_or_else(|| Error::Calibration(format!("no validation data for {t}")))?;
        let mut ms = Vec::with_capacity(task.val.len());
        for s in &task.val {
            let ad = state.visual_adapter(t)?;
            let v = encode_image(&s.latent, &state.encoder, ad)?;
            let bd = scorer.score_features(&BTreeMap::from([(t, v)]))?;
            ms.push(bd.msp[&t]);
        }
        let value = nearest_rank_quantile(&ms, q)
            .ok_or_else(|| Error::Calibration(format!("empty validation set for {t}")))?;
        thresholds.insert(t, value - T::of(THRESHOLD_EPS));
    }
    Ok(ThresholdBank { thresholds })
}

/// Tasks whose MSP strictly exceeds their threshold. An empty set marks
/// the sample as potentially unknown.
pub fn detect_unknown<T: Scalar>(bd: &ScoreBreakdown<T>, thresholds: &ThresholdBank<T>) -> BTreeSet<TaskId> {
    bd.msp
        .iter()
        .filter(|(t, &m)| thresholds.thresholds.get(t).is_some_and(|&w| m > w))
        .map(|(&t, _)| t)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionResult<T> {
    /// Task weights `α_t`, summing to one.
    pub weights: BTreeMap<TaskId, T>,
    /// Task confidences `r_t`.
    pub confidences: BTreeMap<TaskId, T>,
    /// Fused score per candidate, in candidate order.
    pub scores: Vec<T>,
    /// Index of the winning candidate (lowest index on ties).
    pub predicted: usize,
}

/// Knowledge-fusion zero-shot prediction over candidate text features.
///
/// Confidence `r_t` is the best prototype similarity of branch `t`; weights
/// are `softmax(r)`. Scores are accumulated as
/// `s_ref + Σ_t α_t (s_t − s_ref)`, which equals `Σ_t α_t s_t` because the
/// weights sum to one and reproduces a shared score exactly when every
/// branch agrees.
pub fn fused_zero_shot<T: Scalar>(
    x_star: &RealVector<T>,
    candidates: &[RealVector<T>],
    state: &ModelState<T>,
) -> Result<FusionResult<T>> {
    if candidates.is_empty() {
        return input("fused zero-shot needs at least one candidate");
    }
    if state.num_tasks() == 0 {
        return state_err("no task has been learned");
    }
    let mut feats = BTreeMap::new();
    let mut conf = BTreeMap::new();
    for (&t, ad) in &state.visual_adapters {
        let v = encode_image(x_star, &state.encoder, ad)?;
        let mut r = T::neg_infinity();
        for &c in state.classes_of(t)? {
            let p = state.prototypes.get(c).ok_or_else(|| Error::State(format!("missing prototype for {c}")))?;
            r = r.max(v.dot(p));
        }
        conf.insert(t, r);
        feats.insert(t, v);
    }
    let rs: Vec<T> = conf.values().copied().collect();
    let alpha: BTreeMap<TaskId, T> = conf.keys().copied().zip(softmax(&rs)).collect();

    let reference = feats.values().next().expect("at least one task");
    let mut scores = Vec::with_capacity(candidates.len());
    for tk in candidates {
        let s_ref = reference.dot(tk);
        let mut q = s_ref;
        for (t, v) in &feats {
            q = q + alpha[t] * (v.dot(tk) - s_ref);
        }
        scores.push(q);
    }
    let mut predicted = 0;
    for (k, &s) in scores.iter().enumerate() {
        if s > scores[predicted] {
            predicted = k;
        }
    }
    Ok(FusionResult { weights: alpha, confidences: conf, scores, predicted })
}

/// Fraction of samples whose predicted class lies in the same task as the
/// true class.
pub fn routing_accuracy(predictions: &[ClassId], labels: &[ClassId], class_task: &BTreeMap<ClassId, TaskId>) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return input("routing accuracy needs equal-length, nonempty prediction and label lists");
    }
    let task = |c: &ClassId| class_task.get(c).copied().ok_or_else(|| Error::Input(format!("{c} has no task")));
    let mut hits = 0usize;
    for (p, y) in predictions.iter().zip(labels) {
        if task(p)? == task(y)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{ClassPrompt, FrozenEncoder, LowRankAdapter};
    use crate::compensation::{CompHead, TextSubspace};
    use crate::numerics::projectors;

    fn score(task: usize, q: f64) -> ClassScore<f64> {
        ClassScore { task: TaskId(task), s: q, g: 0.0, proto: 0.0, q }
    }

    fn bd(qs: &[(usize, usize, f64)]) -> ScoreBreakdown<f64> {
        ScoreBreakdown {
            classes: qs.iter().map(|&(c, t, q)| (ClassId(c), score(t, q))).collect(),
            msp: BTreeMap::new(),
        }
    }

    #[test]
    fn predict_unique_and_tie() {
        assert_eq!(predict(&bd(&[(0, 0, 0.1), (1, 0, 0.9), (2, 1, 0.3)])), ClassId(1));
        assert_eq!(predict(&bd(&[(0, 0, 0.1), (3, 1, 0.9), (5, 1, 0.9)])), ClassId(3));
    }

    #[test]
    fn quantile_examples() {
        let ms: Vec<f64> = (0..20).map(|i| 0.3 + 0.01 * ((i * 7) % 20) as f64).collect();
        let mut sorted = ms.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(nearest_rank_quantile(&ms, 0.05), Some(sorted[0]));
        assert_eq!(nearest_rank_quantile(&ms, 0.0), Some(sorted[0]));
        assert_eq!(nearest_rank_quantile(&ms, 0.5), Some(sorted[9]));
        assert_eq!(nearest_rank_quantile::<f64>(&[], 0.5), None);
    }

    #[test]
    fn detect_unknown_membership() {
        let mut b = bd(&[]);
        b.msp = BTreeMap::from([(TaskId(0), 0.9), (TaskId(1), 0.4), (TaskId(2), 0.6)]);
        let th = |w: [f64; 3]| ThresholdBank { thresholds: (0..3).map(|t| (TaskId(t), w[t])).collect() };
        assert_eq!(detect_unknown(&b, &th([0.1, 0.1, 0.1])).len(), 3);
        assert!(detect_unknown(&b, &th([0.95, 0.95, 0.95])).is_empty());
        assert_eq!(detect_unknown(&b, &th([0.5, 0.5, 0.6])), BTreeSet::from([TaskId(0)]));
    }

    #[test]
    fn routing_accuracy_counts() {
        let ct: BTreeMap<_, _> = (0..4).map(|c| (ClassId(c), TaskId(c / 2))).collect();
        let y = [ClassId(0), ClassId(1), ClassId(2), ClassId(3)];
        assert_eq!(routing_accuracy(&[ClassId(1), ClassId(0), ClassId(3), ClassId(2)], &y, &ct).unwrap(), 1.0);
        assert_eq!(routing_accuracy(&[ClassId(0), ClassId(0), ClassId(2), ClassId(0)], &y, &ct).unwrap(), 0.75);
        assert_eq!(routing_accuracy(&[ClassId(2), ClassId(3), ClassId(0), ClassId(1)], &y, &ct).unwrap(), 0.0);
        assert!(routing_accuracy(&[ClassId(9)], &[ClassId(0)], &ct).is_err());
    }

    /// Two tasks, two classes each, identity encoder in dim 4, hand-set
    /// adapters, prototypes and heads.
    pub(crate) fn hand_state() -> ModelState<f64> {
        let enc = FrozenEncoder::identity(4);
        let mut st = ModelState::new(enc, 1, 0);
        let zero = |_| LowRankAdapter { a: RealMatrix::zeros(1, 4), b: RealMatrix::zeros(4, 1), rank: 1, scale: 1.0 };
        for t in 0..2 {
            let ad: LowRankAdapter<f64> = zero(t);
            st.visual_adapters.insert(TaskId(t), ad);
            st.task_classes.insert(TaskId(t), vec![ClassId(2 * t), ClassId(2 * t + 1)]);
        }
        // Task 1's adapter swaps axes 0 and 2: W = I + e2 e0ᵀ − e0 e0ᵀ.
        let mut a = RealMatrix::zeros(1, 4);
        a[(0, 0)] = 1.0;
        let mut b = RealMatrix::zeros(4, 1);
        b[(2, 0)] = 1.0;
        b[(0, 0)] = -1.0;
        st.visual_adapters.insert(TaskId(1), LowRankAdapter { a, b, rank: 1, scale: 1.0 });
        for c in 0..4 {
            st.prompts.insert(ClassId(c), ClassPrompt { class_id: ClassId(c), prompt_latent: RealVector::basis(4, c) });
            st.prototypes.prototypes.insert(ClassId(c), RealVector::basis(4, (c + 1) % 4));
            st.prototypes.class_task.insert(ClassId(c), TaskId(c / 2));
        }
        for t in 0..2 {
            let u = RealMatrix::from_columns(4, &[RealVector::basis(4, 2 * t), RealVector::basis(4, 2 * t + 1)]).unwrap();
            let (p, q) = projectors(&u, 4).unwrap();
            st.subspaces.insert(TaskId(t), TextSubspace { task_id: TaskId(t), u_t: u, p_t: p, p_perp_t: q, rank: 2 });
            let w = RealMatrix::from_fn(4, 2, |i, j| (1 + i + 3 * j + t) as f64 / 10.0);
            st.heads.insert(TaskId(t), CompHead { task_id: TaskId(t), w_comp: w, class_order: vec![ClassId(2 * t), ClassId(2 * t + 1)], orthogonal: true });
        }
        st
    }

    #[test]
    fn hand_built_scores_match_enumeration() {
        let st = hand_state();
        let hp = HyperParams { beta: 0.2, gamma: 0.3, ..Default::default() };
        let x = RealVector::from_f64(&[0.5, 0.1, 0.7, 0.2]);
        let b = score_all(&x, &st, &hp).unwrap();
        let n = |v: [f64; 4]| {
            let s = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.map(|a| a / s)
        };
        // Branch 0 leaves x alone; branch 1 moves x₀ into axis 2.
        let v = [n([0.5, 0.1, 0.7, 0.2]), n([0.0, 0.1, 1.2, 0.2])];
        for c in 0..4usize {
            let t = c / 2;
            let vt = v[t];
            let s = vt[c];
            let proto = vt[(c + 1) % 4];
            let j = c % 2;
            // P⊥ keeps axes outside {2t, 2t+1}.
            let g: f64 = (0..4)
                .filter(|&i| i / 2 != t)
                .map(|i| vt[i] * (1 + i + 3 * j + t) as f64 / 10.0)
                .sum();
            let cs = b.classes[&ClassId(c)];
            assert!((cs.s - s).abs() < 1e-15 && (cs.proto - proto).abs() < 1e-15 && (cs.g - g).abs() < 1e-15, "class {c}");
            assert!((cs.q - (s + 0.2 * g + 0.3 * proto)).abs() < 1e-15);
        }
        let zero = score_all(&x, &st, &HyperParams { beta: 0.0, gamma: 0.0, ..hp }).unwrap();
        assert!(zero.classes.values().all(|c| c.q == c.s));
    }

    #[test]
    fn missing_head_is_reported() {
        let mut st = hand_state();
        st.heads.remove(&TaskId(1));
        let err = Scorer::new(&st, 0.2, 0.2).err().unwrap();
        assert!(err.to_string().contains("compensation head for task 1"));
        assert!(Scorer::new(&st, 0.0, 0.2).is_ok());
    }

    #[test]
    fn single_class_task_msp_is_one() {
        let mut st = hand_state();
        st.task_classes.insert(TaskId(1), vec![ClassId(2)]);
        st.heads.clear();
        let b = Scorer::new(&st, 0.0, 0.2).unwrap().score(&RealVector::from_f64(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(b.msp[&TaskId(1)], 1.0);
    }

    #[test]
    fn fusion_weights_and_single_task_reduction() {
        let st = hand_state();
        let cands: Vec<_> = (0..4).map(|k| RealVector::<f64>::basis(4, k)).collect();
        // x₀ = 0, so both branches see the same unit feature v.
        let x = RealVector::from_f64(&[0.0, 0.3, 0.0, 0.9]);
        let f = fused_zero_shot(&x, &cands, &st).unwrap();
        assert!((f.weights.values().sum::<f64>() - 1.0).abs() < 1e-12);
        // r₀ = max(v₁, v₂), r₁ = max(v₃, v₀).
        let n = 0.9f64.hypot(0.3);
        let a0 = 1.0 / (1.0 + ((0.9 - 0.3) / n).exp());
        assert!((f.weights[&TaskId(0)] - a0).abs() < 1e-15);
        let equal = fused_zero_shot(&RealVector::from_f64(&[0.0, 0.5, 0.0, 0.5]), &cands, &st).unwrap();
        assert_eq!(equal.weights[&TaskId(0)], 0.5);
        assert_eq!(equal.weights[&TaskId(1)], 0.5);

        let mut one = hand_state();
        one.visual_adapters.remove(&TaskId(1));
        let f1 = fused_zero_shot(&RealVector::from_f64(&[0.5, 0.1, 0.7, 0.2]), &cands, &one).unwrap();
        let v = encode_image(&RealVector::from_f64(&[0.5, 0.1, 0.7, 0.2]), &one.encoder, &one.visual_adapters[&TaskId(0)]).unwrap();
        for (k, c) in cands.iter().enumerate() {
            assert_eq!(f1.scores[k], v.dot(c));
        }
        assert_eq!(f1.predicted, 2);
        assert!(fused_zero_shot(&x, &[], &st).is_err());
    }
}
