//! Stage-1 incremental knowledge learning: the CLIP-style, anchor and
//! separation losses, their analytic gradients, the per-task descent loop,
//! and anchor/prototype caching.
//!
//! Feature-level loss functions take unit features. Gradient variants
//! return derivatives with respect to those unit features; the chain rule
//! through normalization and the adapter factors happens in
//! [`base_objective`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_image, encode_text, new_adapter, LowRankAdapter};
use crate::error::{input, state_err, Error, Result};
use crate::ids::{ClassId, TaskId};
use crate::numerics::{cosine, RealMatrix, RealVector};
use crate::rng::{substream_seed, Rng};
use crate::scalar::Scalar;
use crate::state::ModelState;
use crate::synthdata::{Sample, TaskDataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub lambda_anc: f64,
    pub lambda_sep: f64,
    /// Separation threshold on pairwise text cosine.
    pub tau: f64,
    /// Logit scale applied to cosines inside the stage-1 softmax.
    pub kappa: f64,
    /// Logit scale inside the compensation cross-entropy.
    pub kappa_comp: f64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    /// Weight of compensation logits in the routing score.
    pub beta: f64,
    /// Weight of the prototype cue in the routing score.
    pub gamma: f64,
    pub lora_rank: usize,
    /// Cosine-decay the step size over each stage.
    pub cosine_decay: bool,
    /// Validation quantile used for MSP acceptance thresholds.
    pub threshold_quantile: f64,
    /// Ridge regularization of the analysis-only classifier.
    pub ridge_lambda: f64,
    /// Relative singular-value tolerance for numerical rank.
    pub rank_rel_tol: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda_anc: 1.0,
            lambda_sep: 1.0,
            tau: 0.7,
            kappa: 30.0,
            kappa_comp: 30.0,
            lr_stage1: 0.5,
            lr_stage2: 0.05,
            epochs_stage1: 20,
            epochs_stage2: 5,
            batch_size: 32,
            beta: 0.2,
            gamma: 0.2,
            lora_rank: 4,
            cosine_decay: true,
            threshold_quantile: 0.05,
            ridge_lambda: 1e-3,
            rank_rel_tol: crate::numerics::DEFAULT_RANK_TOL,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            // tau = 1 is accepted: the hinge then never activates.
            return bad("tau must lie in (0,1]");
        }
        if !(self.kappa > 0.0 && self.kappa_comp > 0.0) {
            return bad("logit scales must be positive");
        }
        if !(self.lr_stage1 > 0.0 && self.lr_stage2 > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 || self.lora_rank == 0 {
            return bad("batch_size and lora_rank must be positive");
        }
        if !(0.0..1.0).contains(&self.threshold_quantile) {
            return bad("threshold_quantile must lie in [0,1)");
        }
        if !(self.rank_rel_tol > 0.0 && self.rank_rel_tol < 1.0) {
            return bad("rank_rel_tol must lie in (0,1)");
        }
        if self.lambda_anc < 0.0 || self.lambda_sep < 0.0 || self.ridge_lambda <= 0.0 {
            return bad("loss weights must be nonnegative and ridge_lambda positive");
        }
        Ok(())
    }

    /// Step size at `step` of `total` under the configured schedule.
    pub fn step_size(&self, base: f64, step: usize, total: usize) -> f64 {
        if self.cosine_decay && total > 0 {
            base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
        } else {
            base
        }
    }
}

fn log_softmax_row<T: Scalar>(logits: &[T]) -> (Vec<T>, T) {
    let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let z: T = logits.iter().map(|&l| (l - m).exp()).sum();
    let lse = m + z.ln();
    (logits.iter().map(|&l| (l - lse).exp()).collect(), lse)
}

/// Softmax cross-entropy over rows of logits. Returns the mean loss and
/// `∂loss/∂logits`.
pub(crate) fn softmax_xent<T: Scalar>(logits: &[Vec<T>], targets: &[usize]) -> (T, Vec<Vec<T>>) {
    let n = T::of_usize(logits.len().max(1));
    let mut loss = T::zero();
    let mut grads = Vec::with_capacity(logits.len());
    for (row, &y) in logits.iter().zip(targets) {
        let (p, lse) = log_softmax_row(row);
        let top = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        // ln(1 + Σ_{c≠y} e^{z_c − z_y}) keeps tiny losses accurate.
        let term = if row[y] >= top {
            row.iter().enumerate().filter(|&(c, _)| c != y).map(|(_, &l)| (l - row[y]).exp()).sum::<T>().ln_1p()
        } else {
            lse - row[y]
        };
        loss = loss + term;
        grads.push(p.iter().enumerate().map(|(c, &pc)| (pc - if c == y { T::one() } else { T::zero() }) / n).collect());
    }
    (loss / n, grads)
}

/// Gradients of a feature-level loss.
#[derive(Clone, Debug)]
pub struct FeatureGrads<T> {
    pub image: Vec<RealVector<T>>,
    pub text: BTreeMap<ClassId, RealVector<T>>,
}

fn class_index<T>(labels: &[ClassId], text_feats: &BTreeMap<ClassId, RealVector<T>>) -> Result<(Vec<ClassId>, Vec<usize>)> {
    let classes: Vec<ClassId> = text_feats.keys().copied().collect();
    let targets = labels
        .iter()
        .map(|y| classes.binary_search(y).map_err(|_| Error::Input(format!("label {y} outside the current class set"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((classes, targets))
}

/// `−mean log softmax(κ·⟨v_i, t_c⟩)` at the true class, over the current
/// task's classes (`text_feats`).
pub fn clip_loss<T: Scalar>(
    image_feats: &[RealVector<T>],
    labels: &[ClassId],
    text_feats: &BTreeMap<ClassId, RealVector<T>>,
    kappa: T,
) -> Result<T> {
    Ok(clip_loss_grad(image_feats, labels, text_feats, kappa)?.0)
}

pub fn clip_loss_grad<T: Scalar>(
    image_feats: &[RealVector<T>],
    labels: &[ClassId],
    text_feats: &BTreeMap<ClassId, RealVector<T>>,
    kappa: T,
) -> Result<(T, FeatureGrads<T>)> {
    if image_feats.len() != labels.len() {
        return input("image features and labels differ in length");
    }
    let (classes, targets) = class_index(labels, text_feats)?;
    let texts: Vec<&RealVector<T>> = classes.iter().map(|c| &text_feats[c]).collect();
    let logits: Vec<Vec<T>> =
        image_feats.iter().map(|v| texts.iter().map(|t| kappa * v.dot(t)).collect()).collect();
    let (loss, dz) = softmax_xent(&logits, &targets);

    let dim = texts.first().map_or(0, |t| t.dim());
    let mut dt: Vec<RealVector<T>> = vec![RealVector::zeros(dim); texts.len()];
    let mut dv = Vec::with_capacity(image_feats.len());
    for (v, row) in image_feats.iter().zip(&dz) {
        let mut g = RealVector::zeros(dim);
        for (c, &d) in row.iter().enumerate() {
            g.axpy(kappa * d, texts[c]);
            dt[c].axpy(kappa * d, v);
        }
        dv.push(g);
    }
    let text = classes.into_iter().zip(dt).collect();
    Ok((loss.max(T::zero()), FeatureGrads { image: dv, text }))
}

/// Mean of `1 − cos(t_c, z_c)` over the classes in `current` (the previous
/// classes); zero when there are none.
pub fn anchor_loss<T: Scalar>(
    current: &BTreeMap<ClassId, RealVector<T>>,
    cache: &crate::state::AnchorCache<T>,
) -> Result<T> {
    if current.is_empty() {
        return Ok(T::zero());
    }
    let mut sum = T::zero();
    for (&c, t) in current {
        let z = cache.get(c).ok_or_else(|| Error::State(format!("no cached anchor for {c}")))?;
        sum = sum + (T::one() - cosine(t, z)?);
    }
    Ok((sum / T::of_usize(current.len())).max(T::zero()))
}

/// Anchor loss with its gradient, for unit `current` features.
pub fn anchor_loss_grad<T: Scalar>(
    current: &BTreeMap<ClassId, RealVector<T>>,
    cache: &crate::state::AnchorCache<T>,
) -> Result<(T, BTreeMap<ClassId, RealVector<T>>)> {
    let mut grads = BTreeMap::new();
    if current.is_empty() {
        return Ok((T::zero(), grads));
    }
    let w = T::one() / T::of_usize(current.len());
    let mut sum = T::zero();
    for (&c, t) in current {
        let z = cache.get(c).ok_or_else(|| Error::State(format!("no cached anchor for {c}")))?;
        sum = sum + (T::one() - t.dot(z));
        grads.insert(c, z.scale(-w));
    }
    Ok(((sum * w).max(T::zero()), grads))
}

/// Hinge penalty on new-class text features whose cosine to any other seen
/// class exceeds `tau`. `text_feats` holds every seen class.
pub fn separation_loss<T: Scalar>(
    text_feats: &BTreeMap<ClassId, RealVector<T>>,
    new_class_ids: &[ClassId],
    tau: T,
) -> Result<T> {
    separation_impl(text_feats, new_class_ids, tau, |a, b| cosine(a, b)).map(|(l, _)| l)
}

/// Separation loss with its gradient, for unit features.
pub fn separation_loss_grad<T: Scalar>(
    text_feats: &BTreeMap<ClassId, RealVector<T>>,
    new_class_ids: &[ClassId],
    tau: T,
) -> Result<(T, BTreeMap<ClassId, RealVector<T>>)> {
    separation_impl(text_feats, new_class_ids, tau, |a, b| Ok(a.dot(b)))
}

fn separation_impl<T: Scalar>(
    text_feats: &BTreeMap<ClassId, RealVector<T>>,
    new_class_ids: &[ClassId],
    tau: T,
    sim: impl Fn(&RealVector<T>, &RealVector<T>) -> Result<T>,
) -> Result<(T, BTreeMap<ClassId, RealVector<T>>)> {
    let mut grads: BTreeMap<ClassId, RealVector<T>> = BTreeMap::new();
    if let Some(c) = new_class_ids.iter().find(|c| !text_feats.contains_key(c)) {
        return input(format!("new {c} is not among the seen classes"));
    }
    let seen = text_feats.len();
    if seen < 2 || new_class_ids.is_empty() {
        return Ok((T::zero(), grads));
    }
    let w = T::one() / (T::of_usize(new_class_ids.len()) * T::of_usize(seen - 1));
    let mut loss = T::zero();
    for &c in new_class_ids {
        let tc = &text_feats[&c];
        for (&o, to) in text_feats {
            if o == c {
                continue;
            }
            let excess = sim(tc, to)? - tau;
            if excess > T::zero() {
                loss = loss + excess * w;
                let dim = tc.dim();
                grads.entry(c).or_insert_with(|| RealVector::zeros(dim)).axpy(w, to);
                grads.entry(o).or_insert_with(|| RealVector::zeros(dim)).axpy(w, tc);
            }
        }
    }
    Ok((loss, grads))
}

/// Gradient of a scalar loss with respect to an adapter's factors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrad<T> {
    pub a: RealMatrix<T>,
    pub b: RealMatrix<T>,
}

impl<T: Scalar> AdapterGrad<T> {
    /// From `G = ∂L/∂W` of the effective weight `W = W₀ + s·B·A`.
    fn from_weight_grad(g: &RealMatrix<T>, ad: &LowRankAdapter<T>) -> Self {
        Self {
            a: ad.b.transpose().matmul(g).scale(ad.scale),
            b: g.matmul(&ad.a.transpose()).scale(ad.scale),
        }
    }
}

/// Applies `param −= lr · grad`.
pub fn descend<T: Scalar>(ad: &mut LowRankAdapter<T>, g: &AdapterGrad<T>, lr: T) {
    ad.a.axpy(-lr, &g.a);
    ad.b.axpy(-lr, &g.b);
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BaseLoss<T> {
    pub clip: T,
    pub anc: T,
    pub sep: T,
    pub total: T,
}

/// Gradients of the stage-1 objective. Only the current task's visual
/// adapter and the shared text adapter are trainable, so nothing else
/// appears here.
#[derive(Clone, Debug)]
pub struct BaseGrads<T> {
    pub visual: AdapterGrad<T>,
    pub text: AdapterGrad<T>,
}

/// Unit feature and the raw norm it was divided by.
struct Encoded<T> {
    unit: RealVector<T>,
    norm: T,
}

fn encode_raw<T: Scalar>(w: &RealMatrix<T>, x: &RealVector<T>) -> Result<Encoded<T>> {
    let (unit, norm) = crate::encoder::unit(w.matvec(x))?;
    Ok(Encoded { unit, norm })
}

/// Pulls `g = ∂L/∂y` for `y = u/‖u‖` back to `∂L/∂u`.
fn through_normalize<T: Scalar>(g: &RealVector<T>, e: &Encoded<T>) -> RealVector<T> {
    let mut du = g.clone();
    du.axpy(-g.dot(&e.unit), &e.unit);
    du.scale(T::one() / e.norm)
}

/// `L_clip + λ_anc·L_anc + λ_sep·L_sep` on a batch of task `task_id`, with
/// gradients for the current visual adapter and the shared text adapter.
///
/// Text features of every seen class are re-encoded through the current
/// shared adapter.
pub fn base_objective<T: Scalar>(
    batch: &[&Sample<T>],
    task_id: TaskId,
    state: &ModelState<T>,
    hp: &HyperParams,
) -> Result<(BaseLoss<T>, BaseGrads<T>)> {
    let vis = state.visual_adapter(task_id)?;
    let current = state.classes_of(task_id)?;
    let seen = state.seen_classes();
    let enc = &state.encoder;

    let w_img = enc.w_img0.add(&vis.delta());
    let w_txt = enc.w_txt0.add(&state.text_adapter.delta());

    let images: Vec<Encoded<T>> = batch.iter().map(|s| encode_raw(&w_img, &s.latent)).collect::<Result<_>>()?;
    let texts: BTreeMap<ClassId, Encoded<T>> = seen
        .iter()
        .map(|&c| Ok((c, encode_raw(&w_txt, &state.prompt(c)?.prompt_latent)?)))
        .collect::<Result<_>>()?;

    let unit_of = |cs: &mut dyn Iterator<Item = ClassId>| -> BTreeMap<ClassId, RealVector<T>> {
        cs.map(|c| (c, texts[&c].unit.clone())).collect()
    };
    let cur_feats = unit_of(&mut current.iter().copied());
    let prev_feats = unit_of(&mut seen.iter().copied().filter(|c| !current.contains(c)));
    let all_feats = unit_of(&mut seen.iter().copied());

    let img_units: Vec<RealVector<T>> = images.iter().map(|e| e.unit.clone()).collect();
    let labels: Vec<ClassId> = batch.iter().map(|s| s.label).collect();
    let (clip, g_clip) = clip_loss_grad(&img_units, &labels, &cur_feats, T::of(hp.kappa))?;
    let (anc, g_anc) = anchor_loss_grad(&prev_feats, &state.anchors)?;
    let (sep, g_sep) = separation_loss_grad(&all_feats, current, T::of(hp.tau))?;

    let (la, ls) = (T::of(hp.lambda_anc), T::of(hp.lambda_sep));
    let total = clip + la * anc + ls * sep;

    let dim = enc.feature_dim;
    let mut dtext: BTreeMap<ClassId, RealVector<T>> = BTreeMap::new();
    let mut acc = |c: ClassId, s: T, g: &RealVector<T>| {
        dtext.entry(c).or_insert_with(|| RealVector::zeros(dim)).axpy(s, g);
    };
    for (&c, g) in &g_clip.text {
        acc(c, T::one(), g);
    }
    for (&c, g) in &g_anc {
        acc(c, la, g);
    }
    for (&c, g) in &g_sep {
        acc(c, ls, g);
    }

    let mut gw_img = RealMatrix::zeros(dim, enc.latent_dim());
    for ((e, g), s) in images.iter().zip(&g_clip.image).zip(batch) {
        gw_img.add_outer(T::one(), &through_normalize(g, e).0, &s.latent.0);
    }
    let mut gw_txt = RealMatrix::zeros(dim, enc.latent_dim());
    for (c, g) in &dtext {
        let du = through_normalize(g, &texts[c]);
        gw_txt.add_outer(T::one(), &du.0, &state.prompt(*c)?.prompt_latent.0);
    }

    Ok((
        BaseLoss { clip, anc, sep, total },
        BaseGrads {
            visual: AdapterGrad::from_weight_grad(&gw_img, vis),
            text: AdapterGrad::from_weight_grad(&gw_txt, &state.text_adapter),
        },
    ))
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: usize,
    pub epoch: usize,
    pub l_clip: f64,
    pub l_anc: f64,
    pub l_sep: f64,
    pub total: f64,
}

/// Registers the task's classes and prompts in the state.
pub fn register_task<T: Scalar>(task: &TaskDataset<T>, state: &mut ModelState<T>) -> Result<()> {
    if state.task_classes.contains_key(&task.task_id) {
        return Ok(());
    }
    if let Some(c) = task.class_ids.iter().find(|&&c| state.task_of(c).is_some()) {
        return state_err(format!("{c} already belongs to another task"));
    }
    for p in &task.prompts {
        state.prompts.insert(p.class_id, p.clone());
    }
    if let Some(c) = task.class_ids.iter().find(|c| !state.prompts.contains_key(c)) {
        return state_err(format!("{c} has no prompt"));
    }
    state.task_classes.insert(task.task_id, task.class_ids.clone());
    Ok(())
}

/// Creates the task's visual adapter and trains it jointly with the shared
/// text adapter by mini-batch gradient descent. Earlier visual adapters are
/// never touched.
pub fn train_task_stage1<T: Scalar>(
    task: &TaskDataset<T>,
    state: &mut ModelState<T>,
    hp: &HyperParams,
) -> Result<Vec<EpochLog>> {
    if task.train.is_empty() {
        return input(format!("{} has no training samples", task.task_id));
    }
    if state.visual_adapters.contains_key(&task.task_id) {
        return state_err(format!("{} already has a visual adapter", task.task_id));
    }
    register_task(task, state)?;
    let adapter = new_adapter(
        hp.lora_rank,
        state.encoder.latent_dim(),
        state.feature_dim(),
        substream_seed(state.seed, "adapter-init", task.task_id.0 as u64),
    );
    state.visual_adapters.insert(task.task_id, adapter);

    let mut rng = Rng::substream(state.seed, "batch-order", task.task_id.0 as u64);
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let per_epoch = task.train.len().div_ceil(hp.batch_size);
    let total_steps = per_epoch * hp.epochs_stage1;
    let mut step = 0;
    let mut log = Vec::with_capacity(hp.epochs_stage1);
    for epoch in 0..hp.epochs_stage1 {
        rng.shuffle(&mut order);
        let mut sums = [0.0f64; 4];
        for chunk in order.chunks(hp.batch_size) {
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &task.train[i]).collect();
            let (loss, grads) = base_objective(&batch, task.task_id, state, hp)?;
            for (s, v) in sums.iter_mut().zip([loss.clip, loss.anc, loss.sep, loss.total]) {
                *s += v.to_f64_lossy();
            }
            let lr = T::of(hp.step_size(hp.lr_stage1, step, total_steps));
            step += 1;
            let vis = state.visual_adapters.get_mut(&task.task_id).expect("inserted above");
            descend(vis, &grads.visual, lr);
            descend(&mut state.text_adapter, &grads.text, lr);
        }
        let n = per_epoch as f64;
        log.push(EpochLog {
            task: task.task_id.0,
            epoch,
            l_clip: sums[0] / n,
            l_anc: sums[1] / n,
            l_sep: sums[2] / n,
            total: sums[3] / n,
        });
    }
    if let Some(bad) = log.iter().find(|r| !r.total.is_finite()) {
        return Err(Error::Numerical { msg: format!("non-finite stage-1 loss in {}", task.task_id), iterations: bad.epoch });
    }
    Ok(log)
}

/// Caches the current text feature of each new class as its anchor and
/// stores unit visual prototypes from the task's training features.
pub fn cache_anchors_and_prototypes<T: Scalar>(task: &TaskDataset<T>, state: &mut ModelState<T>) -> Result<()> {
    let adapter = state.visual_adapter(task.task_id)?.clone();
    let mut new_protos = Vec::new();
    for &c in &task.class_ids {
        let mut sum = RealVector::zeros(state.feature_dim());
        let mut count = 0;
        for s in task.train.iter().filter(|s| s.label == c) {
            sum = sum.add(&encode_image(&s.latent, &state.encoder, &adapter)?);
            count += 1;
        }
        if count == 0 {
            return state_err(format!("{c} has no training samples for its prototype"));
        }
        let (p, _) = crate::encoder::unit(sum.scale(T::one() / T::of_usize(count)))?;
        new_protos.push((c, p));
    }
    for &c in &task.class_ids {
        let z = encode_text(state.prompt(c)?, &state.encoder, &state.text_adapter)?;
        state.anchors.insert_once(c, z)?;
    }
    for (c, p) in new_protos {
        state.prototypes.prototypes.insert(c, p);
        state.prototypes.class_task.insert(c, task.task_id);
    }
    Ok(())
}

/// Unit visual features of `samples` through task `t`'s adapter.
pub fn task_features<T: Scalar>(samples: &[Sample<T>], t: TaskId, state: &ModelState<T>) -> Result<Vec<RealVector<T>>> {
    let ad = state.visual_adapter(t)?;
    samples.iter().map(|s| encode_image(&s.latent, &state.encoder, ad)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{ClassPrompt, FrozenEncoder};
    use crate::rng::gaussian_matrix;
    use crate::state::AnchorCache;
    use crate::synthdata::{generate_task_stream, SynthConfig};

    fn feats(vs: &[(usize, &[f64])]) -> BTreeMap<ClassId, RealVector<f64>> {
        vs.iter().map(|&(c, v)| (ClassId(c), RealVector::from_f64(v))).collect()
    }

    #[test]
    fn clip_loss_examples() {
        let v = vec![RealVector::from_f64(&[1.0, 0.0])];
        let one = feats(&[(0, &[0.6, 0.8])]);
        assert_eq!(clip_loss(&v, &[ClassId(0)], &one, 30.0).unwrap(), 0.0);

        let h = 1.0 / 2f64.sqrt();
        let eq = feats(&[(0, &[h, h]), (1, &[h, -h])]);
        let l = clip_loss(&v, &[ClassId(0)], &eq, 30.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);

        let aligned = feats(&[(0, &[1.0, 0.0]), (1, &[0.0, 1.0])]);
        let l = clip_loss(&v, &[ClassId(0)], &aligned, 30.0).unwrap();
        let expected = (-30f64).exp().ln_1p();
        assert!((l - expected).abs() < 1e-10 * expected, "{l} vs {expected}");
        assert!((l - 9.36e-14).abs() < 1e-15);

        assert!(matches!(clip_loss(&v, &[ClassId(7)], &aligned, 30.0), Err(Error::Input(_))));
    }

    #[test]
    fn anchor_loss_examples() {
        let mut cache = AnchorCache::default();
        assert_eq!(anchor_loss(&BTreeMap::new(), &cache).unwrap(), 0.0);
        cache.insert_once(ClassId(0), RealVector::from_f64(&[1.0, 0.0])).unwrap();
        assert_eq!(anchor_loss(&feats(&[(0, &[1.0, 0.0])]), &cache).unwrap(), 0.0);
        let half = feats(&[(0, &[0.5, 3f64.sqrt() / 2.0])]);
        assert!((anchor_loss(&half, &cache).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(anchor_loss(&feats(&[(3, &[1.0, 0.0])]), &cache), Err(Error::State(_))));
        assert!(cache.insert_once(ClassId(0), RealVector::from_f64(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn separation_loss_examples() {
        let c = 0.1f64;
        let far = feats(&[(0, &[1.0, 0.0]), (1, &[c, (1.0 - c * c).sqrt()])]);
        assert_eq!(separation_loss(&far, &[ClassId(1)], 0.7).unwrap(), 0.0);

        let c = 0.9f64;
        let near = feats(&[(0, &[1.0, 0.0]), (1, &[c, (1.0 - c * c).sqrt()])]);
        assert!((separation_loss(&near, &[ClassId(1)], 0.7).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(separation_loss(&near, &[ClassId(1)], 1.0).unwrap(), 0.0);

        assert_eq!(separation_loss(&feats(&[(0, &[1.0, 0.0])]), &[ClassId(0)], 0.7).unwrap(), 0.0);
        assert!(separation_loss(&near, &[ClassId(5)], 0.7).is_err());
    }

    fn toy_state(seed: u64) -> (ModelState<f64>, TaskDataset<f64>) {
        let cfg = SynthConfig { num_tasks: 2, classes_per_task: 4, samples_per_class: 6, latent_dim: 6, ..Default::default() };
        let tasks = generate_task_stream::<f64>(&cfg, seed).unwrap();
        let enc = FrozenEncoder::random(6, 5, 0.3, seed).unwrap();
        let mut st = ModelState::new(enc, 2, seed);
        register_task(&tasks[0], &mut st).unwrap();
        (st, tasks[0].clone())
    }

    #[test]
    fn zero_weights_reduce_to_clip_loss() {
        let (mut st, task) = toy_state(1);
        st.visual_adapters.insert(task.task_id, new_adapter(2, 6, 5, 3));
        let hp = HyperParams { lambda_anc: 0.0, lambda_sep: 0.0, ..Default::default() };
        let batch: Vec<_> = task.train.iter().collect();
        let (loss, _) = base_objective(&batch, task.task_id, &st, &hp).unwrap();
        let v = task_features(&task.train, task.task_id, &st).unwrap();
        let labels: Vec<_> = task.train.iter().map(|s| s.label).collect();
        let t = st.text_features(&task.class_ids).unwrap();
        assert_eq!(loss.total, clip_loss(&v, &labels, &t, 30.0).unwrap());
        assert_eq!(loss.anc, 0.0);
    }

    fn loss_at(st: &ModelState<f64>, task: &TaskDataset<f64>, hp: &HyperParams) -> f64 {
        let batch: Vec<_> = task.train.iter().collect();
        base_objective(&batch, task.task_id, st, hp).unwrap().0.total
    }

    #[test]
    fn base_gradient_matches_central_differences() {
        let (mut st, task0) = toy_state(2);
        let mut rng = Rng::from_seed_u64(99);
        // Learn task 0 crudely so task 1 has anchors and separation terms.
        let cfg = SynthConfig { num_tasks: 2, classes_per_task: 4, samples_per_class: 6, latent_dim: 6, ..Default::default() };
        let task1 = generate_task_stream::<f64>(&cfg, 2).unwrap()[1].clone();
        st.visual_adapters.insert(task0.task_id, new_adapter(2, 6, 5, 3));
        cache_anchors_and_prototypes(&task0, &mut st).unwrap();
        register_task(&task1, &mut st).unwrap();
        let mut ad = new_adapter(2, 6, 5, 4);
        ad.b = gaussian_matrix(&mut rng, 5, 2, 0.5);
        st.visual_adapters.insert(task1.task_id, ad);
        st.text_adapter.b = gaussian_matrix(&mut rng, 5, 2, 0.5);
        let hp = HyperParams { kappa: 5.0, tau: 0.3, ..Default::default() };

        let batch: Vec<_> = task1.train.iter().collect();
        let (loss, g) = base_objective(&batch, task1.task_id, &st, &hp).unwrap();
        assert!(loss.anc > 0.0);
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        let mut check = |get: &dyn Fn(&mut ModelState<f64>) -> &mut f64, analytic: f64| {
            let mut plus = st.clone();
            *get(&mut plus) += eps;
            let mut minus = st.clone();
            *get(&mut minus) -= eps;
            let fd = (loss_at(&plus, &task1, &hp) - loss_at(&minus, &task1, &hp)) / (2.0 * eps);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max(rel);
        };
        let t1 = task1.task_id;
        for k in 0..12 {
            let (i, j) = (k / 6, k % 6);
            check(&|s| &mut s.visual_adapters.get_mut(&t1).unwrap().a[(i, j)], g.visual.a[(i, j)]);
            check(&|s| &mut s.text_adapter.a[(i, j)], g.text.a[(i, j)]);
        }
        for k in 0..10 {
            let (i, j) = (k / 2, k % 2);
            check(&|s| &mut s.visual_adapters.get_mut(&t1).unwrap().b[(i, j)], g.visual.b[(i, j)]);
            check(&|s| &mut s.text_adapter.b[(i, j)], g.text.b[(i, j)]);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn zero_epochs_registers_zero_delta_adapter() {
        let (mut st, task) = toy_state(3);
        let before = st.text_adapter.clone();
        let hp = HyperParams { epochs_stage1: 0, lora_rank: 2, ..Default::default() };
        train_task_stage1(&task, &mut st, &hp).unwrap();
        assert_eq!(st.visual_adapter(task.task_id).unwrap().delta().frobenius(), 0.0);
        assert_eq!(st.text_adapter, before);
        assert!(train_task_stage1(&task, &mut st, &hp).is_err());
    }

    #[test]
    fn empty_task_is_rejected() {
        let (mut st, mut task) = toy_state(4);
        task.train.clear();
        assert!(matches!(train_task_stage1(&task, &mut st, &HyperParams::default()), Err(Error::Input(_))));
    }

    #[test]
    fn prototype_of_single_sample_and_bisector() {
        let enc = FrozenEncoder::<f64>::identity(2);
        let mut st = ModelState::new(enc, 1, 0);
        let h = 1.0 / 2f64.sqrt();
        let s = |x: f64, y: f64, c: usize| Sample { latent: RealVector::from_f64(&[x, y]), label: ClassId(c) };
        let task = TaskDataset {
            task_id: TaskId(0),
            class_ids: vec![ClassId(0), ClassId(1)],
            prompts: (0..2)
                .map(|c| ClassPrompt { class_id: ClassId(c), prompt_latent: RealVector::basis(2, c) })
                .collect(),
            train: vec![s(3.0, 0.0, 0), s(1.0, 0.2, 1), s(0.2, 1.0, 1)],
            val: vec![],
        };
        let hp = HyperParams { epochs_stage1: 0, lora_rank: 1, ..Default::default() };
        train_task_stage1(&task, &mut st, &hp).unwrap();
        cache_anchors_and_prototypes(&task, &mut st).unwrap();
        assert_eq!(st.prototypes.get(ClassId(0)).unwrap().0, vec![1.0, 0.0]);
        let p1 = st.prototypes.get(ClassId(1)).unwrap();
        assert!((p1.0[0] - h).abs() < 1e-15 && (p1.0[1] - h).abs() < 1e-15);
        let current = st.text_features(&task.class_ids).unwrap();
        assert_eq!(anchor_loss(&current, &st.anchors).unwrap(), 0.0);
        assert!(cache_anchors_and_prototypes(&task, &mut st).is_err());
    }

    #[test]
    fn separable_task_reaches_high_train_accuracy() {
        let cfg = SynthConfig { num_tasks: 1, classes_per_task: 4, samples_per_class: 30, latent_dim: 12, intra_class_noise: 0.8, ..Default::default() };
        let task = generate_task_stream::<f64>(&cfg, 5).unwrap().remove(0);
        let enc = FrozenEncoder::random(12, 12, 0.8, 5).unwrap();
        let mut st = ModelState::new(enc, 4, 5);
        train_task_stage1(&task, &mut st, &HyperParams::default()).unwrap();
        let v = task_features(&task.train, task.task_id, &st).unwrap();
        let t = st.text_features(&task.class_ids).unwrap();
        let correct = v
            .iter()
            .zip(&task.train)
            .filter(|(v, s)| {
                let best = t.iter().max_by(|a, b| v.dot(a.1).partial_cmp(&v.dot(b.1)).unwrap()).unwrap().0;
                *best == s.label
            })
            .count();
        let acc = correct as f64 / task.train.len() as f64;
        let oracle = nearest_mean_accuracy(&task);
        assert!(oracle >= 0.95, "oracle {oracle}");
        assert!(acc >= 0.95, "train accuracy {acc}");
    }

    /// Linear classifier fit directly on the latents: nearest class mean.
    fn nearest_mean_accuracy(task: &TaskDataset<f64>) -> f64 {
        let means: Vec<(ClassId, RealVector<f64>)> = task
            .class_ids
            .iter()
            .map(|&c| {
                let xs: Vec<_> = task.train.iter().filter(|s| s.label == c).collect();
                let mut m = RealVector::zeros(xs[0].latent.dim());
                for s in &xs {
                    m.axpy(1.0 / xs.len() as f64, &s.latent);
                }
                (c, m)
            })
            .collect();
        let hits = task
            .train
            .iter()
            .filter(|s| {
                let d = |m: &RealVector<f64>| s.latent.sub(m).norm();
                means.iter().min_by(|a, b| d(&a.1).partial_cmp(&d(&b.1)).unwrap()).unwrap().0 == s.label
            })
            .count();
        hits as f64 / task.train.len() as f64
    }

    #[test]
    fn training_never_touches_previous_adapters_or_anchors() {
        let cfg = SynthConfig { num_tasks: 3, classes_per_task: 3, samples_per_class: 10, latent_dim: 8, ..Default::default() };
        let tasks = generate_task_stream::<f64>(&cfg, 6).unwrap();
        let enc = FrozenEncoder::random(8, 8, 0.5, 6).unwrap();
        let mut st = ModelState::new(enc, 2, 6);
        let hp = HyperParams { lora_rank: 2, epochs_stage1: 3, ..Default::default() };
        for task in &tasks {
            let before_ad = serde_json::to_string(&st.visual_adapters).unwrap();
            let before_anchor = serde_json::to_string(&st.anchors).unwrap();
            train_task_stage1(task, &mut st, &hp).unwrap();
            let after: BTreeMap<_, _> =
                st.visual_adapters.iter().filter(|(t, _)| **t != task.task_id).map(|(t, a)| (*t, a.clone())).collect();
            assert_eq!(before_ad, serde_json::to_string(&after).unwrap());
            assert_eq!(before_anchor, serde_json::to_string(&st.anchors).unwrap());
            cache_anchors_and_prototypes(task, &mut st).unwrap();
        }
        for p in st.prototypes.prototypes.values() {
            assert!((p.norm() - 1.0).abs() < 1e-12);
        }
    }
}
