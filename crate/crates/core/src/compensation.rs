//! Stage-2 orthogonal compensation: per-task text subspace, a linear head
//! projected onto that subspace's orthogonal complement on every forward
//! pass, and its cross-entropy training.

use serde::{Deserialize, Serialize};

use crate::error::{input, state_err, Result};
use crate::ids::{ClassId, TaskId};
use crate::numerics::{orthonormal_basis, projectors, RealMatrix, RealVector};
use crate::rng::{gaussian_matrix, Rng};
use crate::scalar::Scalar;
use crate::state::{ModelState, PrototypeBank};
use crate::synthdata::TaskDataset;
use crate::training::{softmax_xent, task_features, HyperParams};

/// Column space of a task's text-feature matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextSubspace<T> {
    pub task_id: TaskId,
    /// Orthonormal basis, `feature_dim × rank`.
    pub u_t: RealMatrix<T>,
    pub p_t: RealMatrix<T>,
    pub p_perp_t: RealMatrix<T>,
    pub rank: usize,
}

/// SVD of `T = [t_c1, …]` with numerical-rank truncation at
/// `rel_tol · sigma_1`.
pub fn build_text_subspace<T: Scalar>(
    task_id: TaskId,
    text_feats: &[RealVector<T>],
    feature_dim: usize,
    rel_tol: T,
) -> Result<TextSubspace<T>> {
    if text_feats.is_empty() {
        return input(format!("{task_id} has no text features"));
    }
    let t = RealMatrix::from_columns(feature_dim, text_feats)?;
    let u_t = orthonormal_basis(&t, rel_tol)?;
    let (p_t, p_perp_t) = projectors(&u_t, feature_dim)?;
    Ok(TextSubspace { task_id, rank: u_t.cols(), u_t, p_t, p_perp_t })
}

/// Compensation head of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompHead<T> {
    pub task_id: TaskId,
    /// Raw parameters, `feature_dim × |classes|`.
    pub w_comp: RealMatrix<T>,
    pub class_order: Vec<ClassId>,
    /// Whether the head is projected through `P⊥` (off only in ablations).
    pub orthogonal: bool,
}

impl<T: Scalar> CompHead<T> {
    fn check(&self, sub: &TextSubspace<T>) -> Result<()> {
        if self.task_id != sub.task_id {
            return state_err(format!("head of {} paired with subspace of {}", self.task_id, sub.task_id));
        }
        if self.class_order.len() != self.w_comp.cols() {
            return state_err(format!(
                "head of {} has {} columns for {} classes",
                self.task_id,
                self.w_comp.cols(),
                self.class_order.len()
            ));
        }
        Ok(())
    }

    /// `Ŵ = P⊥·W` (or `W` when the orthogonality constraint is off).
    pub fn effective(&self, sub: &TextSubspace<T>) -> Result<RealMatrix<T>> {
        self.check(sub)?;
        Ok(if self.orthogonal { sub.p_perp_t.matmul(&self.w_comp) } else { self.w_comp.clone() })
    }
}

/// Head whose columns are the task's class prototypes, in `class_order`.
pub fn init_comp_head<T: Scalar>(
    task_id: TaskId,
    class_order: &[ClassId],
    prototypes: &PrototypeBank<T>,
) -> Result<CompHead<T>> {
    let cols = class_order
        .iter()
        .map(|&c| prototypes.get(c).cloned().ok_or_else(|| crate::Error::State(format!("missing prototype for {c}"))))
        .collect::<Result<Vec<_>>>()?;
    let dim = cols.first().map_or(0, |c| c.dim());
    Ok(CompHead {
        task_id,
        w_comp: RealMatrix::from_columns(dim, &cols)?,
        class_order: class_order.to_vec(),
        orthogonal: true,
    })
}

/// `g = vᵀ·Ŵ`, one logit per class in the head's order.
pub fn comp_logits<T: Scalar>(v: &RealVector<T>, head: &CompHead<T>, sub: &TextSubspace<T>) -> Result<RealVector<T>> {
    let w = head.effective(sub)?;
    if w.rows() != v.dim() {
        return input(format!("feature of dim {} for a head of dim {}", v.dim(), w.rows()));
    }
    Ok(w.tr_matvec(v))
}

/// Compensation cross-entropy over `κ·g` and its gradient with respect to
/// the raw `w_comp`.
pub fn comp_loss_grad<T: Scalar>(
    feats: &[RealVector<T>],
    labels: &[ClassId],
    head: &CompHead<T>,
    sub: &TextSubspace<T>,
    kappa: T,
) -> Result<(T, RealMatrix<T>)> {
    let w = head.effective(sub)?;
    let targets = labels
        .iter()
        .map(|y| {
            head.class_order
                .iter()
                .position(|c| c == y)
                .ok_or_else(|| crate::Error::Input(format!("label {y} not in {}", head.task_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let logits: Vec<Vec<T>> = feats.iter().map(|v| w.tr_matvec(v).0.into_iter().map(|g| kappa * g).collect()).collect();
    let (loss, dz) = softmax_xent(&logits, &targets);
    let mut g_eff = RealMatrix::zeros(w.rows(), w.cols());
    for (v, row) in feats.iter().zip(&dz) {
        let scaled: Vec<T> = row.iter().map(|&d| kappa * d).collect();
        g_eff.add_outer(T::one(), &v.0, &scaled);
    }
    // P⊥ is a symmetric constant, so ∂L/∂W = P⊥·∂L/∂Ŵ.
    let g = if head.orthogonal { sub.p_perp_t.matmul(&g_eff) } else { g_eff };
    Ok((loss.max(T::zero()), g))
}

pub fn comp_loss<T: Scalar>(
    feats: &[RealVector<T>],
    labels: &[ClassId],
    head: &CompHead<T>,
    sub: &TextSubspace<T>,
    kappa: T,
) -> Result<T> {
    Ok(comp_loss_grad(feats, labels, head, sub, kappa)?.0)
}

/// Ablation switches for stage 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompOptions {
    pub orth_constraint: bool,
    pub proto_init: bool,
}

impl Default for CompOptions {
    fn default() -> Self {
        Self { orth_constraint: true, proto_init: true }
    }
}

/// Builds the task's text subspace from the frozen shared text branch,
/// initializes the head and trains only `w_comp`. Returns the mean
/// compensation loss per epoch.
pub fn train_comp_head<T: Scalar>(
    task: &TaskDataset<T>,
    state: &mut ModelState<T>,
    hp: &HyperParams,
    opts: CompOptions,
) -> Result<Vec<f64>> {
    if task.train.is_empty() {
        return input(format!("{} has no training samples", task.task_id));
    }
    let t = task.task_id;
    let classes = state.classes_of(t)?.to_vec();
    let text = state.text_features(&classes)?;
    let cols: Vec<RealVector<T>> = classes.iter().map(|c| text[c].clone()).collect();
    let sub = build_text_subspace(t, &cols, state.feature_dim(), T::of(hp.rank_rel_tol))?;

    let mut head = if opts.proto_init {
        init_comp_head(t, &classes, &state.prototypes)?
    } else {
        let mut rng = Rng::substream(state.seed, "comp-init", t.0 as u64);
        let std = 1.0 / (state.feature_dim() as f64).sqrt();
        CompHead {
            task_id: t,
            w_comp: gaussian_matrix(&mut rng, state.feature_dim(), classes.len(), std),
            class_order: classes.clone(),
            orthogonal: true,
        }
    };
    head.orthogonal = opts.orth_constraint;

    let feats = task_features(&task.train, t, state)?;
    let labels: Vec<ClassId> = task.train.iter().map(|s| s.label).collect();
    let kappa = T::of(hp.kappa_comp);
    let mut rng = Rng::substream(state.seed, "comp-batch-order", t.0 as u64);
    let mut order: Vec<usize> = (0..feats.len()).collect();
    let per_epoch = feats.len().div_ceil(hp.batch_size);
    let total = per_epoch * hp.epochs_stage2;
    let mut step = 0;
    let mut log = Vec::with_capacity(hp.epochs_stage2);
    for _ in 0..hp.epochs_stage2 {
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            let bf: Vec<RealVector<T>> = chunk.iter().map(|&i| feats[i].clone()).collect();
            let bl: Vec<ClassId> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, g) = comp_loss_grad(&bf, &bl, &head, &sub, kappa)?;
            sum += loss.to_f64_lossy();
            let lr = T::of(hp.step_size(hp.lr_stage2, step, total));
            step += 1;
            head.w_comp.axpy(-lr, &g);
        }
        log.push(sum / per_epoch as f64);
    }
    state.subspaces.insert(t, sub);
    state.heads.insert(t, head);
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gram_schmidt;
    use crate::rng::gaussian_vector;

    fn sub_from(cols: &[RealVector<f64>], dim: usize) -> TextSubspace<f64> {
        build_text_subspace(TaskId(0), cols, dim, 1e-10).unwrap()
    }

    fn head_from(w: RealMatrix<f64>) -> CompHead<f64> {
        let n = w.cols();
        CompHead { task_id: TaskId(0), w_comp: w, class_order: (0..n).map(ClassId).collect(), orthogonal: true }
    }

    #[test]
    fn subspace_ranks() {
        let e: Vec<RealVector<f64>> = (0..3).map(|k| RealVector::basis(8, k)).collect();
        assert_eq!(sub_from(&e, 8).rank, 3);
        let dup = vec![e[0].clone(), e[0].clone()];
        assert_eq!(sub_from(&dup, 8).rank, 1);
        let mut rng = Rng::from_seed_u64(1);
        let cols: Vec<_> = (0..4).map(|_| gaussian_vector::<f64>(&mut rng, 8, 1.0)).collect();
        let s = sub_from(&cols, 8);
        assert_eq!(s.rank, 4);
        for c in &cols {
            assert!(s.p_perp_t.matvec(c).norm() < 1e-12);
        }
        assert!(s.p_t.matmul(&s.p_t).sub(&s.p_t).frobenius() < 1e-10);
        assert!(build_text_subspace::<f64>(TaskId(0), &[], 8, 1e-10).is_err());
    }

    #[test]
    fn head_inside_subspace_is_annihilated() {
        let e: Vec<RealVector<f64>> = (0..2).map(|k| RealVector::basis(4, k)).collect();
        let s = sub_from(&e, 4);
        let inside = head_from(RealMatrix::from_columns(4, &e).unwrap());
        assert_eq!(inside.effective(&s).unwrap().frobenius(), 0.0);
        let v = RealVector::from_f64(&[0.3, 0.2, 0.5, 0.1]);
        assert_eq!(comp_logits(&v, &inside, &s).unwrap().norm(), 0.0);

        let outside = head_from(RealMatrix::from_columns(4, &[RealVector::basis(4, 2), RealVector::basis(4, 3)]).unwrap());
        assert_eq!(outside.effective(&s).unwrap(), outside.w_comp);
    }

    #[test]
    fn mixed_head_and_logits_match_two_step_oracle() {
        let mut rng = Rng::from_seed_u64(4);
        let cols: Vec<_> = (0..3).map(|_| gaussian_vector::<f64>(&mut rng, 7, 1.0)).collect();
        let s = sub_from(&cols, 7);
        let head = head_from(gaussian_matrix(&mut rng, 7, 3, 1.0));
        let eff = head.effective(&s).unwrap();
        for j in 0..3 {
            let direct = s.p_perp_t.matvec(&head.w_comp.column(j));
            assert!(direct.sub(&eff.column(j)).norm() < 1e-14);
        }
        assert!(s.p_t.matmul(&eff).frobenius() < 1e-8);
        let v = gaussian_vector::<f64>(&mut rng, 7, 1.0);
        let pv = s.p_perp_t.matvec(&v);
        let g = comp_logits(&v, &head, &s).unwrap();
        for j in 0..3 {
            assert!((g.0[j] - pv.dot(&head.w_comp.column(j))).abs() < 1e-12);
        }
        let inside = s.p_t.matvec(&v);
        assert!(comp_logits(&inside, &head, &s).unwrap().norm() < 1e-12);
        assert_eq!(comp_logits(&v, &head_from(RealMatrix::zeros(7, 3)), &s).unwrap().norm(), 0.0);
    }

    #[test]
    fn mismatched_head_is_a_state_error() {
        let s = sub_from(&[RealVector::basis(3, 0)], 3);
        let mut h = head_from(RealMatrix::zeros(3, 2));
        h.class_order.pop();
        assert!(matches!(comp_logits(&RealVector::basis(3, 1), &h, &s), Err(crate::Error::State(_))));
        let mut h2 = head_from(RealMatrix::zeros(3, 2));
        h2.task_id = TaskId(4);
        assert!(matches!(h2.effective(&s), Err(crate::Error::State(_))));
    }

    #[test]
    fn comp_gradient_matches_central_differences() {
        let mut rng = Rng::from_seed_u64(8);
        let cols: Vec<_> = (0..4).map(|_| gaussian_vector::<f64>(&mut rng, 9, 1.0)).collect();
        let s = sub_from(&cols, 9);
        let mut head = head_from(gaussian_matrix(&mut rng, 9, 4, 1.0));
        let feats: Vec<_> = (0..12).map(|_| gaussian_vector::<f64>(&mut rng, 9, 1.0).normalized(0.0).unwrap()).collect();
        let labels: Vec<_> = (0..12).map(|i| ClassId(i % 4)).collect();
        let (_, g) = comp_loss_grad(&feats, &labels, &head, &s, 3.0).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..9 {
            for j in 0..4 {
                let orig = head.w_comp[(i, j)];
                head.w_comp[(i, j)] = orig + eps;
                let lp = comp_loss(&feats, &labels, &head, &s, 3.0).unwrap();
                head.w_comp[(i, j)] = orig - eps;
                let lm = comp_loss(&feats, &labels, &head, &s, 3.0).unwrap();
                head.w_comp[(i, j)] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                worst = worst.max((fd - g[(i, j)]).abs() / fd.abs().max(g[(i, j)].abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "{worst}");
        // Gradient lies in the complement: P·G = 0.
        assert!(s.p_t.matmul(&g).frobenius() < 1e-12);
    }

    #[test]
    fn single_class_loss_is_zero() {
        let s = sub_from(&[RealVector::basis(3, 0)], 3);
        let h = head_from(gram_schmidt(&RealMatrix::from_rows(&[vec![0.0], vec![1.0], vec![1.0]]).unwrap(), 1e-8));
        let feats = vec![RealVector::from_f64(&[0.0, 0.6, 0.8])];
        let (l, g) = comp_loss_grad(&feats, &[ClassId(0)], &h, &s, 30.0).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.frobenius(), 0.0);
    }
}
