//! Evaluation: accuracy curves, AUROC, subspace distances, anchor
//! preservation, routing margins and parameter counts.

use std::collections::BTreeMap;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::encoder::encode_text;
use crate::error::{input, Error, Result};
use crate::ids::{ClassId, TaskId};
use crate::numerics::{energy_basis, orthonormal_basis, orthonormality_defect, projectors, RealMatrix};
use crate::routing::ScoreBreakdown;
use crate::scalar::Scalar;
use crate::state::ModelState;
use crate::synthdata::TaskDataset;
use crate::training::task_features;

/// Share of squared singular energy kept by image-feature bases.
pub const IMAGE_ENERGY: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub avg_acc: f64,
    pub last_acc: f64,
    pub per_stage: Vec<f64>,
}

pub fn accuracy_curve(per_stage: &[f64]) -> Result<AccuracyCurve> {
    let Some(&last_acc) = per_stage.last() else {
        return input("accuracy curve needs at least one stage");
    };
    Ok(AccuracyCurve {
        avg_acc: per_stage.iter().sum::<f64>() / per_stage.len() as f64,
        last_acc,
        per_stage: per_stage.to_vec(),
    })
}

/// Exact AUROC by rank statistics: `P(id > ood) + ½·P(id = ood)`.
pub fn auroc_ratio<T: Scalar>(id_scores: &[T], ood_scores: &[T]) -> Result<Ratio<u64>> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return input("AUROC needs nonempty ID and OOD score sets");
    }
    if id_scores.iter().chain(ood_scores).any(|s| s.is_nan()) {
        return input("AUROC scores must not be NaN");
    }
    let mut all: Vec<(T, bool)> = id_scores.iter().map(|&s| (s, true)).chain(ood_scores.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("no NaN"));
    // Sum of doubled mid-ranks of the ID scores (ranks start at 1).
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let ids = all[i..j].iter().filter(|x| x.1).count() as u64;
        // Ranks i+1..=j have mean (i + 1 + j) / 2.
        twice_rank_sum += ids * (i as u64 + 1 + j as u64);
        i = j;
    }
    let n1 = id_scores.len() as u64;
    let n2 = ood_scores.len() as u64;
    let twice_u = twice_rank_sum - n1 * (n1 + 1);
    Ok(Ratio::new(twice_u, 2 * n1 * n2))
}

pub fn auroc<T: Scalar>(id_scores: &[T], ood_scores: &[T]) -> Result<f64> {
    let r = auroc_ratio(id_scores, ood_scores)?;
    Ok(*r.numer() as f64 / *r.denom() as f64)
}

fn check_basis<T: Scalar>(b: &RealMatrix<T>, name: &str) -> Result<()> {
    let defect = orthonormality_defect(b);
    if defect > T::of(T::ORTHO_TOL) {
        return input(format!("{name} basis not orthonormal: max |BᵀB − I| = {defect:e}"));
    }
    Ok(())
}

/// `(1/r)·Σ_j ‖b_j − P_tgt·b_j‖` over the `r` columns of `b_src`.
pub fn directional_distance<T: Scalar>(b_src: &RealMatrix<T>, b_tgt: &RealMatrix<T>) -> Result<T> {
    check_basis(b_src, "source")?;
    check_basis(b_tgt, "target")?;
    if b_src.cols() == 0 {
        return input("source basis is empty");
    }
    if b_src.rows() != b_tgt.rows() {
        return input(format!("bases live in dims {} and {}", b_src.rows(), b_tgt.rows()));
    }
    let (_, p_perp) = projectors(b_tgt, b_tgt.rows())?;
    let total: T = b_src.columns().iter().map(|b| p_perp.matvec(b).norm()).sum();
    Ok(total / T::of_usize(b_src.cols()))
}

/// Mean of both directional distances.
pub fn symmetric_distance<T: Scalar>(b1: &RealMatrix<T>, b2: &RealMatrix<T>) -> Result<T> {
    Ok((directional_distance(b1, b2)? + directional_distance(b2, b1)?) / T::of(2.0))
}

/// Re-orthonormalized span of two bases.
pub fn joint_basis<T: Scalar>(b1: &RealMatrix<T>, b2: &RealMatrix<T>) -> Result<RealMatrix<T>> {
    if b2.cols() == 0 {
        return Ok(b1.clone());
    }
    if b1.cols() == 0 {
        return Ok(b2.clone());
    }
    orthonormal_basis(&b1.hcat(b2), T::of(1e-8))
}

/// Mean cosine between each anchored class's current text feature and its
/// cached anchor.
pub fn anchor_preservation<T: Scalar>(state: &ModelState<T>) -> Result<T> {
    if state.anchors.is_empty() {
        return input("no anchors cached");
    }
    let mut sum = T::zero();
    for (&c, z) in &state.anchors.anchors {
        let t = encode_text(state.prompt(c)?, &state.encoder, &state.text_adapter)?;
        sum = sum + crate::numerics::cosine(&t, z)?;
    }
    Ok(sum / T::of_usize(state.anchors.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginStats {
    pub mean_margin: f64,
    pub margins: Vec<f64>,
}

/// Ground-truth-task best score minus best competing-task score.
/// `None` when a breakdown has no competing task.
pub fn sample_margin<T: Scalar>(bd: &ScoreBreakdown<T>, label: ClassId, class_task: &BTreeMap<ClassId, TaskId>) -> Result<Option<f64>> {
    let gt = *class_task.get(&label).ok_or_else(|| Error::Input(format!("{label} has no task")))?;
    let mut own = f64::NEG_INFINITY;
    let mut other = f64::NEG_INFINITY;
    for (c, s) in &bd.classes {
        let t = *class_task.get(c).ok_or_else(|| Error::Input(format!("{c} has no task")))?;
        let q = s.q.to_f64_lossy();
        if t == gt {
            own = own.max(q);
        } else {
            other = other.max(q);
        }
    }
    if other == f64::NEG_INFINITY || own == f64::NEG_INFINITY {
        return Ok(None);
    }
    Ok(Some(own - other))
}

pub fn margin_stats<T: Scalar>(
    breakdowns: &[ScoreBreakdown<T>],
    labels: &[ClassId],
    class_task: &BTreeMap<ClassId, TaskId>,
) -> Result<Option<MarginStats>> {
    if breakdowns.len() != labels.len() {
        return input("margin inputs are not aligned");
    }
    let mut margins = Vec::with_capacity(labels.len());
    for (bd, &y) in breakdowns.iter().zip(labels) {
        match sample_margin(bd, y, class_task)? {
            Some(m) => margins.push(m),
            None => return Ok(None),
        }
    }
    if margins.is_empty() {
        return Ok(None);
    }
    let mean_margin = margins.iter().sum::<f64>() / margins.len() as f64;
    Ok(Some(MarginStats { mean_margin, margins }))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub text_adapter: usize,
    pub visual_adapters: usize,
    pub heads: usize,
    pub prototypes: usize,
    pub anchors: usize,
    pub total: usize,
}

pub fn parameter_count<T: Scalar>(state: &ModelState<T>) -> ParamCounts {
    let text_adapter = state.text_adapter.num_params();
    let visual_adapters = state.visual_adapters.values().map(|a| a.num_params()).sum();
    let heads = state.heads.values().map(|h| h.w_comp.rows() * h.w_comp.cols()).sum();
    let prototypes = state.prototypes.prototypes.values().map(|p| p.dim()).sum();
    let anchors = state.anchors.anchors.values().map(|a| a.dim()).sum();
    ParamCounts {
        text_adapter,
        visual_adapters,
        heads,
        prototypes,
        anchors,
        total: text_adapter + visual_adapters + heads + prototypes + anchors,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubspaceDistanceReport {
    /// Image vs text basis, averaged over tasks.
    pub d_it: f64,
    /// Image vs compensation basis.
    pub d_ic: f64,
    /// Image vs joint text/compensation basis.
    pub d_itc: f64,
    /// Symmetric distances between consecutive tasks' text bases.
    pub adjacent_text: Vec<f64>,
    /// Symmetric distances between consecutive tasks' compensation bases.
    pub adjacent_comp: Vec<f64>,
}

#[derive(Clone, Debug)]
struct TaskBases<T> {
    image: RealMatrix<T>,
    text: RealMatrix<T>,
    comp: RealMatrix<T>,
}

fn task_bases<T: Scalar>(task: &TaskDataset<T>, state: &ModelState<T>) -> Result<TaskBases<T>> {
    let t = task.task_id;
    let sub = state.subspaces.get(&t).ok_or_else(|| Error::State(format!("missing text subspace for {t}")))?;
    let head = state.heads.get(&t).ok_or_else(|| Error::State(format!("missing compensation head for {t}")))?;
    let feats = task_features(&task.train, t, state)?;
    let v = RealMatrix::from_columns(state.feature_dim(), &feats)?;
    let tol = T::of(crate::numerics::DEFAULT_RANK_TOL);
    let image = energy_basis(&v, T::of(IMAGE_ENERGY), tol)?;
    let comp = orthonormal_basis(&sub.p_perp_t.matmul(&head.w_comp), T::of(1e-8))?;
    Ok(TaskBases { image, text: sub.u_t.clone(), comp })
}

/// Distances for every task that has completed stage 2. Tasks whose
/// compensation span is empty are skipped in the image-vs-compensation
/// average.
pub fn subspace_distances<T: Scalar>(tasks: &[TaskDataset<T>], state: &ModelState<T>) -> Result<SubspaceDistanceReport> {
    let bases: Vec<TaskBases<T>> = tasks
        .iter()
        .filter(|d| state.heads.contains_key(&d.task_id))
        .map(|d| task_bases(d, state))
        .collect::<Result<_>>()?;
    if bases.is_empty() {
        return Ok(SubspaceDistanceReport::default());
    }
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let (mut it, mut ic, mut itc) = (Vec::new(), Vec::new(), Vec::new());
    for b in &bases {
        it.push(directional_distance(&b.image, &b.text)?.to_f64_lossy());
        if b.comp.cols() > 0 {
            ic.push(directional_distance(&b.image, &b.comp)?.to_f64_lossy());
        }
        itc.push(directional_distance(&b.image, &joint_basis(&b.text, &b.comp)?)?.to_f64_lossy());
    }
    let mut adjacent_text = Vec::new();
    let mut adjacent_comp = Vec::new();
    for w in bases.windows(2) {
        adjacent_text.push(symmetric_distance(&w[0].text, &w[1].text)?.to_f64_lossy());
        if w[0].comp.cols() > 0 && w[1].comp.cols() > 0 {
            adjacent_comp.push(symmetric_distance(&w[0].comp, &w[1].comp)?.to_f64_lossy());
        }
    }
    Ok(SubspaceDistanceReport { d_it: mean(&it), d_ic: mean(&ic), d_itc: mean(&itc), adjacent_text, adjacent_comp })
}

/// One row of the per-stage curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub t: usize,
    #[serde(rename = "A_t")]
    pub a_t: f64,
    /// Absent at the final stage (no future classes).
    pub auroc: Option<f64>,
    pub routing_acc: f64,
    /// Absent while only one task is learned.
    pub mean_margin: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RealVector;
    use crate::routing::ClassScore;
    use crate::rng::{gaussian_matrix, Rng};
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn pairwise(id: &[f64], ood: &[f64]) -> Ratio<u64> {
        let mut twice = 0u64;
        for a in id {
            for b in ood {
                twice += if a > b { 2 } else if a == b { 1 } else { 0 };
            }
        }
        Ratio::new(twice, 2 * id.len() as u64 * ood.len() as u64)
    }

    #[test]
    fn accuracy_curve_examples() {
        let c = accuracy_curve(&[0.9, 0.8]).unwrap();
        assert!((c.avg_acc - 0.85).abs() < 1e-15 && c.last_acc == 0.8);
        let c = accuracy_curve(&[0.7]).unwrap();
        assert_eq!(c.avg_acc, c.last_acc);
        assert_eq!(accuracy_curve(&[1.0, 1.0, 1.0]).unwrap().avg_acc, 1.0);
        assert!(accuracy_curve(&[]).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc_ratio(&[0.9, 0.8], &[0.7, 0.85]).unwrap(), Ratio::new(3, 4));
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &[0.5; 3]).unwrap(), 0.5);
        assert!(auroc::<f64>(&[], &[0.1]).is_err());
    }

    proptest! {
        #[test]
        fn auroc_matches_pairwise(id in prop::collection::vec(0u8..12, 1..60), ood in prop::collection::vec(0u8..12, 1..60)) {
            let id: Vec<f64> = id.into_iter().map(|x| x as f64 / 11.0).collect();
            let ood: Vec<f64> = ood.into_iter().map(|x| x as f64 / 11.0).collect();
            prop_assert_eq!(auroc_ratio(&id, &ood).unwrap(), pairwise(&id, &ood));
        }
    }

    fn cols(dim: usize, vs: &[&[f64]]) -> RealMatrix<f64> {
        let vs: Vec<_> = vs.iter().map(|v| RealVector::from_f64(v)).collect();
        RealMatrix::from_columns(dim, &vs).unwrap()
    }

    #[test]
    fn directional_examples() {
        let e1 = cols(3, &[&[1.0, 0.0, 0.0]]);
        let e2 = cols(3, &[&[0.0, 1.0, 0.0]]);
        let e12 = cols(3, &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        assert_eq!(directional_distance(&e1, &e12).unwrap(), 0.0);
        assert_eq!(directional_distance(&e1, &e2).unwrap(), 1.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let diag = cols(3, &[&[h, h, 0.0]]);
        assert!((directional_distance(&diag, &e1).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert!(directional_distance(&cols(3, &[&[1.0, 1.0, 0.0]]), &e1).is_err());
    }

    #[test]
    fn symmetric_examples() {
        let e1 = cols(3, &[&[1.0, 0.0, 0.0]]);
        let e2 = cols(3, &[&[0.0, 1.0, 0.0]]);
        assert_eq!(symmetric_distance(&e1, &e1).unwrap(), 0.0);
        assert_eq!(symmetric_distance(&e1, &e2).unwrap(), 1.0);
        let e13 = cols(3, &[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]);
        let d12 = directional_distance(&e1, &e13).unwrap();
        let d21 = directional_distance(&e13, &e1).unwrap();
        assert_eq!((d12, d21), (0.0, 0.5));
        assert_eq!(symmetric_distance(&e1, &e13).unwrap(), 0.25);
    }

    proptest! {
        #[test]
        fn enlarging_target_never_increases_distance(seed in 0u64..5000, n in 3usize..12) {
            let mut rng = Rng::from_seed_u64(seed);
            let src = orthonormal_basis(&gaussian_matrix::<f64>(&mut rng, n, 2, 1.0), 1e-8).unwrap();
            let tgt = orthonormal_basis(&gaussian_matrix::<f64>(&mut rng, n, 1, 1.0), 1e-8).unwrap();
            let extra = orthonormal_basis(&gaussian_matrix::<f64>(&mut rng, n, 1, 1.0), 1e-8).unwrap();
            let joint = joint_basis(&tgt, &extra).unwrap();
            prop_assert!(directional_distance(&src, &joint).unwrap() <= directional_distance(&src, &tgt).unwrap() + 1e-12);
            prop_assert!(directional_distance(&src, &src).unwrap() < 1e-7);
        }
    }

    #[test]
    fn margin_examples() {
        let ct: BTreeMap<_, _> = (0..4).map(|c| (ClassId(c), TaskId(c / 2))).collect();
        let bd = |qs: [f64; 4]| ScoreBreakdown {
            classes: (0..4).map(|c| (ClassId(c), ClassScore { task: TaskId(c / 2), s: qs[c], g: 0.0, proto: 0.0, q: qs[c] })).collect(),
            msp: BTreeMap::new(),
        };
        let m = margin_stats(&[bd([0.9, 0.2, 0.6, 0.1])], &[ClassId(0)], &ct).unwrap().unwrap();
        assert!((m.mean_margin - 0.3).abs() < 1e-15);
        let m = margin_stats(&[bd([0.5, 0.2, 0.6, 0.1])], &[ClassId(1)], &ct).unwrap().unwrap();
        assert!(m.mean_margin < 0.0);
        let single = ScoreBreakdown {
            classes: BTreeMap::from([(ClassId(0), ClassScore { task: TaskId(0), s: 0.1, g: 0.0, proto: 0.0, q: 0.1 })]),
            msp: BTreeMap::new(),
        };
        assert_eq!(margin_stats(&[single], &[ClassId(0)], &ct).unwrap(), None);
        assert!(margin_stats(&[bd([0.0; 4])], &[ClassId(7)], &ct).is_err());
    }
}
