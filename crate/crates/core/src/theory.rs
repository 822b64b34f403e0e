//! Approximation errors of a full-space classifier `W*` restricted to the
//! text subspace, with and without the orthogonal compensation subspace,
//! together with their singular-value bounds.

use serde::{Deserialize, Serialize};

use crate::error::{input, state_err, Error, Result};
use crate::ids::{ClassId, TaskId};
use crate::numerics::{orthonormal_basis, projectors, solve_spd, svd, RealMatrix};
use crate::rng::{gaussian_matrix, Rng};
use crate::scalar::Scalar;
use crate::state::ModelState;
use crate::synthdata::TaskDataset;
use crate::training::task_features;

/// Relative tolerance for identities and bounds.
pub fn theory_tol<T: Scalar>() -> T {
    T::of(1e-8).max(T::epsilon() * T::of(1000.0))
}

fn check_projector<T: Scalar>(p: &RealMatrix<T>, n: usize, name: &str) -> Result<()> {
    if p.shape() != (n, n) {
        return input(format!("{name} is {:?}, expected {n}×{n}", p.shape()));
    }
    let defect = p.matmul(p).sub(p).frobenius();
    if defect > theory_tol::<T>() * T::one().max(p.frobenius()) {
        return input(format!("{name} is not idempotent: ‖P² − P‖_F = {defect}"));
    }
    Ok(())
}

fn check_pair<T: Scalar>(w: &RealMatrix<T>, p_t: &RealMatrix<T>, p_r: &RealMatrix<T>) -> Result<()> {
    check_projector(p_t, w.rows(), "P_t")?;
    check_projector(p_r, w.rows(), "P_R")?;
    let cross = p_t.matmul(p_r).frobenius();
    if cross > theory_tol::<T>() {
        return input(format!("P_R is not orthogonal to P_t: ‖P_t·P_R‖_F = {cross}"));
    }
    Ok(())
}

fn complement<T: Scalar>(p: &RealMatrix<T>) -> RealMatrix<T> {
    RealMatrix::identity(p.rows()).sub(p)
}

/// `‖(I − P_t)·W*‖_F²`
pub fn text_approx_error<T: Scalar>(w_star: &RealMatrix<T>, p_t: &RealMatrix<T>) -> Result<T> {
    check_projector(p_t, w_star.rows(), "P_t")?;
    Ok(complement(p_t).matmul(w_star).frobenius_sq())
}

/// `‖(I − P_t − P_R)·W*‖_F²`
pub fn dsum_approx_error<T: Scalar>(w_star: &RealMatrix<T>, p_t: &RealMatrix<T>, p_r: &RealMatrix<T>) -> Result<T> {
    check_pair(w_star, p_t, p_r)?;
    Ok(complement(&p_t.add(p_r)).matmul(w_star).frobenius_sq())
}

/// `(E_text − E_⊕, |E_text − E_⊕ − ‖P_R·(I − P_t)·W*‖_F²| / ‖W*‖_F²)`
pub fn reduction_identity<T: Scalar>(w_star: &RealMatrix<T>, p_t: &RealMatrix<T>, p_r: &RealMatrix<T>) -> Result<(T, T)> {
    let e_text = text_approx_error(w_star, p_t)?;
    let e_dsum = dsum_approx_error(w_star, p_t, p_r)?;
    let reduction = e_text - e_dsum;
    let direct = p_r.matmul(&complement(p_t)).matmul(w_star).frobenius_sq();
    Ok((reduction, (reduction - direct).abs() / scale_of(w_star)))
}

fn scale_of<T: Scalar>(w: &RealMatrix<T>) -> T {
    w.frobenius_sq().max(T::min_positive_value())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularTails<T> {
    /// `Σ_{j>r_t} σ_j²`
    pub lemma1_tail: T,
    /// `Σ_{j>m_t} σ_j²`
    pub dsum_tail: T,
    /// `Σ_{r_t<j≤m_t} σ_j²`
    pub reduction_upper: T,
}

/// Squared singular-value tails of `W*` for ranks `r_t` and `m_t = r_t + k_t`.
pub fn singular_value_bounds<T: Scalar>(w_star: &RealMatrix<T>, r_t: usize, k_t: usize) -> Result<SingularTails<T>> {
    let m_t = r_t + k_t;
    if m_t > w_star.rows() {
        return input(format!("r_t + k_t = {m_t} exceeds the feature dimension {}", w_star.rows()));
    }
    let sq: Vec<T> = svd(w_star)?.sigma.iter().map(|&s| s * s).collect();
    let range = |a: usize, b: usize| sq.iter().skip(a).take(b.saturating_sub(a)).copied().sum::<T>();
    Ok(SingularTails {
        lemma1_tail: range(r_t, sq.len()),
        dsum_tail: range(m_t, sq.len()),
        reduction_upper: range(r_t, m_t),
    })
}

/// Every quantity and check of the approximation analysis for one
/// `(W*, P_t, P_R)` triple. Relative quantities are divided by `‖W*‖_F²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport<T> {
    pub e_text: T,
    pub e_dsum: T,
    pub reduction: T,
    pub reduction_identity_residual: T,
    pub reduction_identity_holds: bool,
    /// `E_⊕ ≤ E_text`.
    pub ordering_holds: bool,
    /// `|E_text − (‖W*‖_F² − tr(P_t·W*·W*ᵀ))|`, relative.
    pub pythagorean_residual: T,
    pub lemma1_tail: T,
    pub lemma1_holds: bool,
    /// `(E_text − lemma1_tail)`, relative; zero when `P_t` spans the top
    /// `r_t` left singular directions.
    pub lemma1_gap: T,
    pub dsum_tail: T,
    pub dsum_bound_holds: bool,
    pub reduction_upper: T,
    /// `reduction ≤ reduction_upper + (E_text − lemma1_tail)`; reduces to
    /// `reduction ≤ reduction_upper` whenever the text bound is tight.
    pub reduction_upper_holds: bool,
    pub r_t: usize,
    pub k_t: usize,
    pub m_t: usize,
    pub rho_t: usize,
}

impl<T: Scalar> TheoryReport<T> {
    pub fn all_hold(&self) -> bool {
        self.reduction_identity_holds
            && self.ordering_holds
            && self.lemma1_holds
            && self.dsum_bound_holds
            && self.reduction_upper_holds
    }
}

fn projector_rank<T: Scalar>(p: &RealMatrix<T>) -> usize {
    p.trace().to_f64_lossy().round().max(0.0) as usize
}

/// Fills a [`TheoryReport`] for arbitrary projectors.
pub fn theory_report<T: Scalar>(w_star: &RealMatrix<T>, p_t: &RealMatrix<T>, p_r: &RealMatrix<T>) -> Result<TheoryReport<T>> {
    let tol = theory_tol::<T>();
    let scale = scale_of(w_star);
    let e_text = text_approx_error(w_star, p_t)?;
    let e_dsum = dsum_approx_error(w_star, p_t, p_r)?;
    let (reduction, residual) = reduction_identity(w_star, p_t, p_r)?;
    let m = w_star.matmul(&w_star.transpose());
    let pythagorean = (e_text - (w_star.frobenius_sq() - p_t.matmul(&m).trace())).abs() / scale;

    let r_t = projector_rank(p_t);
    let k_t = projector_rank(p_r);
    let tails = singular_value_bounds(w_star, r_t, k_t)?;
    let rho_t = svd(w_star)?.numerical_rank(T::of(crate::numerics::DEFAULT_RANK_TOL));
    let slack = tol * scale;
    Ok(TheoryReport {
        e_text,
        e_dsum,
        reduction,
        reduction_identity_residual: residual,
        reduction_identity_holds: residual < tol,
        ordering_holds: e_dsum <= e_text + slack,
        pythagorean_residual: pythagorean,
        lemma1_tail: tails.lemma1_tail,
        lemma1_holds: e_text + slack >= tails.lemma1_tail,
        lemma1_gap: (e_text - tails.lemma1_tail) / scale,
        dsum_tail: tails.dsum_tail,
        dsum_bound_holds: e_dsum + slack >= tails.dsum_tail,
        reduction_upper: tails.reduction_upper,
        reduction_upper_holds: reduction <= tails.reduction_upper + (e_text - tails.lemma1_tail) + slack,
        r_t,
        k_t,
        m_t: r_t + k_t,
        rho_t,
    })
}

/// Projectors onto the leading `r` and the next `k` left singular
/// directions of `w`, the configuration in which all three bounds are tight.
pub fn equality_projectors<T: Scalar>(w: &RealMatrix<T>, r: usize, k: usize) -> Result<(RealMatrix<T>, RealMatrix<T>)> {
    let n = w.rows();
    if r + k > n {
        return input(format!("r + k = {} exceeds the feature dimension {n}", r + k));
    }
    let u = svd(w)?.u;
    // Complete the left basis when W* has fewer columns than rows.
    let basis = if u.cols() < r + k {
        let full = crate::numerics::gram_schmidt(&u.hcat(&RealMatrix::identity(n)), T::of(1e-8));
        full.leading_columns(n)
    } else {
        u
    };
    let (p_t, _) = projectors(&basis.leading_columns(r), n)?;
    let (p_r, _) = projectors(&basis.column_range(r, r + k), n)?;
    Ok((p_t, p_r))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WStarSource {
    /// Gaussian `W*` drawn from the `theory-draws` substream.
    Random { draw: u64 },
    /// Ridge regression from the task's training features to one-hot targets.
    RidgeFit,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditMode {
    /// Live text subspace and compensation span.
    #[default]
    Live,
    /// Projectors replaced by the leading singular directions of `W*`, with
    /// the live ranks.
    Equality,
}

/// `(V·Vᵀ + λI)⁻¹·V·Y` for feature columns `V` and one-hot targets `Y`.
pub fn ridge_fit<T: Scalar>(
    feats: &[crate::numerics::RealVector<T>],
    labels: &[ClassId],
    classes: &[ClassId],
    lambda: T,
) -> Result<RealMatrix<T>> {
    if feats.is_empty() || feats.len() != labels.len() {
        return input("ridge fit needs aligned, nonempty features and labels");
    }
    let d = feats[0].dim();
    let v = RealMatrix::from_columns(d, feats)?;
    let mut y = RealMatrix::zeros(feats.len(), classes.len());
    for (i, c) in labels.iter().enumerate() {
        let j = classes.iter().position(|k| k == c).ok_or_else(|| Error::Input(format!("{c} not in the class set")))?;
        y[(i, j)] = T::one();
    }
    let gram = v.matmul(&v.transpose()).add(&RealMatrix::identity(d).scale(lambda));
    solve_spd(&gram, &v.matmul(&y))
}

/// Theory report for a trained task: `P_t` from its text subspace and
/// `P_R` onto the orthonormalized span of `P_t⊥·W_comp`.
pub fn audit_pipeline_theory<T: Scalar>(
    state: &ModelState<T>,
    task: &TaskDataset<T>,
    source: WStarSource,
    mode: AuditMode,
    ridge_lambda: f64,
) -> Result<TheoryReport<T>> {
    let t: TaskId = task.task_id;
    let sub = state.subspaces.get(&t).ok_or_else(|| Error::State(format!("missing text subspace for {t}")))?;
    let head = match state.heads.get(&t) {
        Some(h) => h,
        None => return state_err(format!("missing compensation head for {t}")),
    };
    let d = state.feature_dim();
    let classes = state.classes_of(t)?;
    let w_star = match source {
        WStarSource::Random { draw } => {
            let mut rng = Rng::substream(state.seed, "theory-draws", ((t.0 as u64) << 32) | draw);
            gaussian_matrix(&mut rng, d, classes.len(), 1.0)
        }
        WStarSource::RidgeFit => {
            let feats = task_features(&task.train, t, state)?;
            let labels: Vec<ClassId> = task.train.iter().map(|s| s.label).collect();
            ridge_fit(&feats, &labels, classes, T::of(ridge_lambda))?
        }
    };
    let comp = sub.p_perp_t.matmul(&head.w_comp);
    let r_basis = if comp.frobenius() > T::of(crate::encoder::DEGENERATE_NORM) {
        orthonormal_basis(&comp, T::of(1e-8))?
    } else {
        RealMatrix::zeros(d, 0)
    };
    let (p_r, _) = projectors(&r_basis, d)?;
    match mode {
        AuditMode::Live => theory_report(&w_star, &sub.p_t, &p_r),
        AuditMode::Equality => {
            let (p_t, p_r) = equality_projectors(&w_star, sub.rank, r_basis.cols())?;
            theory_report(&w_star, &p_t, &p_r)
        }
    }
}
