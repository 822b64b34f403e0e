//! Self-contained property suite behind the `verify` command. Each check
//! compares library output with an independent oracle at a fixed tolerance.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use serde::Serialize;

use crate::compensation::{comp_loss, comp_loss_grad, CompHead, TextSubspace};
use crate::encoder::{encode_image, encode_image_frozen, encode_text, encode_text_frozen, new_adapter, FrozenEncoder};
use crate::error::Result;
use crate::harness::{run_in_memory, ExperimentConfig, RunReport};
use crate::ids::{ClassId, TaskId};
use crate::metrics::auroc_ratio;
use crate::numerics::{orthonormal_basis, projectors, RealMatrix};
use crate::rng::{gaussian_matrix, gaussian_vector, Rng};
use crate::routing::fused_zero_shot;
use crate::state::ModelState;
use crate::synthdata::{generate_task_stream, SynthConfig};
use crate::theory::{equality_projectors, theory_report};
use crate::training::{base_objective, cache_anchors_and_prototypes, register_task, HyperParams};

/// Outcome of one contracted check.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &str, budget: Option<Duration>, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let t0 = Instant::now();
    let (mut passed, mut detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    let el = t0.elapsed();
    if let Some(b) = budget {
        if el > b {
            passed = false;
            detail.push_str(&format!("; over budget {:.1}s > {:.0}s", el.as_secs_f64(), b.as_secs_f64()));
        }
    }
    Check { name: name.to_string(), passed, detail, seconds: el.as_secs_f64() }
}

/// Runs every check in order.
pub fn run_all() -> Vec<Check> {
    let mut out = vec![
        timed("theory identities", Some(Duration::from_secs(10)), || theory_suite(120)),
        timed("loss gradients", Some(Duration::from_secs(10)), gradient_suite),
        timed("projectors and normalization", None, projector_suite),
        timed("auroc oracle", None, || auroc_suite(100)),
        timed("freezing and anchors", None, freezing_suite),
    ];
    let t0 = Instant::now();
    let bench = seed_benchmark(20);
    let bench_time = t0.elapsed();
    out.push(timed("compensation effect", None, || {
        let (ok, detail) = compensation_effect(bench.as_ref().map_err(|e| crate::Error::State(e.to_string()))?);
        let ok = ok && bench_time < Duration::from_secs(300);
        Ok((ok, format!("{detail}; 20-seed benchmark {:.1}s", bench_time.as_secs_f64())))
    }));
    out.push(timed("ablation ladder", None, || Ok(ablation_ladder(bench.as_ref().map_err(|e| crate::Error::State(e.to_string()))?))));
    out.push(timed("zero-adapter fusion", None, zero_adapter_fusion));
    out.push(timed("determinism", None, determinism));
    out
}

fn random_projector(rng: &mut Rng, n: usize, r: usize, within: Option<&RealMatrix<f64>>) -> Result<RealMatrix<f64>> {
    if r == 0 {
        return Ok(RealMatrix::zeros(n, n));
    }
    let mut g = gaussian_matrix::<f64>(rng, n, r, 1.0);
    if let Some(q) = within {
        g = q.matmul(&g);
    }
    let basis = orthonormal_basis(&g, 1e-10)?;
    Ok(projectors(&basis, n)?.0)
}

/// Random `(W*, P_t, P_R)` triples plus equality constructions.
pub fn theory_suite(instances: usize) -> Result<(bool, String)> {
    let mut rng = Rng::from_seed_u64(0x7e0);
    let tol = 1e-8;
    let (mut worst_id, mut worst_eq) = (0.0f64, 0.0f64);
    let mut failures = 0;
    for i in 0..instances {
        let n = 4 + rng.below(29);
        let m = 2 + rng.below(11);
        let mut w = gaussian_matrix::<f64>(&mut rng, n, m, 1.0);
        if i % 5 == 0 {
            // Rank-deficient W*.
            let k = 1 + rng.below(m.min(n) - 1);
            let l = gaussian_matrix::<f64>(&mut rng, n, k, 1.0);
            w = l.matmul(&gaussian_matrix::<f64>(&mut rng, k, m, 1.0));
        }
        let r = 1 + rng.below(n - 1);
        let k = rng.below(n - r + 1);
        let p_t = random_projector(&mut rng, n, r, None)?;
        let perp = RealMatrix::identity(n).sub(&p_t);
        let p_r = random_projector(&mut rng, n, k, Some(&perp))?;
        let rep = theory_report(&w, &p_t, &p_r)?;
        // Direct evaluation of the reduction, independent of the report.
        let direct = p_r.matmul(&perp).matmul(&w).frobenius_sq();
        let residual = ((rep.e_text - rep.e_dsum) - direct).abs() / w.frobenius_sq();
        worst_id = worst_id.max(residual);
        if residual >= tol || !rep.all_hold() || rep.e_dsum > rep.e_text * (1.0 + tol) {
            failures += 1;
        }

        let (pt, pr) = equality_projectors(&w, r, k)?;
        let eq = theory_report(&w, &pt, &pr)?;
        let s = w.frobenius_sq();
        let gaps = [
            (eq.e_text - eq.lemma1_tail).abs() / s,
            (eq.e_dsum - eq.dsum_tail).abs() / s,
            (eq.reduction - eq.reduction_upper).abs() / s,
        ];
        let g = gaps.iter().copied().fold(0.0, f64::max);
        worst_eq = worst_eq.max(g);
        if g >= tol || !eq.all_hold() {
            failures += 1;
        }
    }
    Ok((
        failures == 0,
        format!("{instances} instances, {failures} failures, worst identity residual {worst_id:.2e}, worst equality gap {worst_eq:.2e}"),
    ))
}

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

fn grad_instance(seed: u64) -> Result<(ModelState<f64>, crate::synthdata::TaskDataset<f64>)> {
    let cfg = SynthConfig { num_tasks: 2, classes_per_task: 4, samples_per_class: 6, latent_dim: 6, ..Default::default() };
    let tasks = generate_task_stream::<f64>(&cfg, seed)?;
    let enc = FrozenEncoder::random(6, 5, 0.3, seed)?;
    let mut st = ModelState::new(enc, 2, seed);
    let mut rng = Rng::from_seed_u64(seed ^ 0x9e37);
    register_task(&tasks[0], &mut st)?;
    st.visual_adapters.insert(TaskId(0), new_adapter(2, 6, 5, seed));
    cache_anchors_and_prototypes(&tasks[0], &mut st)?;
    register_task(&tasks[1], &mut st)?;
    let mut ad = new_adapter(2, 6, 5, seed + 1);
    ad.b = gaussian_matrix(&mut rng, 5, 2, 0.5);
    st.visual_adapters.insert(TaskId(1), ad);
    st.text_adapter.b = gaussian_matrix(&mut rng, 5, 2, 0.5);
    Ok((st, tasks[1].clone()))
}

/// Worst relative error of the stage-1 adapter gradients under `hp`.
fn base_grad_error(seed: u64, hp: &HyperParams, pick: fn(&crate::training::BaseLoss<f64>) -> f64) -> Result<f64> {
    let (st, task) = grad_instance(seed)?;
    let batch: Vec<_> = task.train.iter().collect();
    let (_, g) = base_objective(&batch, task.task_id, &st, hp)?;
    let eps = 1e-5;
    let eval = |s: &ModelState<f64>| base_objective(&batch, task.task_id, s, hp).map(|(l, _)| pick(&l));
    let mut worst: f64 = 0.0;
    let t = task.task_id;
    type Get = fn(&mut ModelState<f64>, TaskId) -> &mut RealMatrix<f64>;
    let params: [(Get, &RealMatrix<f64>); 4] = [
        (|s, t| &mut s.visual_adapters.get_mut(&t).expect("registered").a, &g.visual.a),
        (|s, t| &mut s.visual_adapters.get_mut(&t).expect("registered").b, &g.visual.b),
        (|s, _| &mut s.text_adapter.a, &g.text.a),
        (|s, _| &mut s.text_adapter.b, &g.text.b),
    ];
    for (get, an) in params {
        for i in 0..an.rows() {
            for j in 0..an.cols() {
                let mut plus = st.clone();
                get(&mut plus, t)[(i, j)] += eps;
                let mut minus = st.clone();
                get(&mut minus, t)[(i, j)] -= eps;
                let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
                worst = worst.max(rel_err(fd, an[(i, j)]));
            }
        }
    }
    Ok(worst)
}

fn comp_grad_error(seed: u64) -> Result<f64> {
    let mut rng = Rng::from_seed_u64(seed);
    let n = 9;
    let cols: Vec<_> = (0..4).map(|_| gaussian_vector::<f64>(&mut rng, n, 1.0)).collect();
    let u = orthonormal_basis(&RealMatrix::from_columns(n, &cols)?, 1e-10)?;
    let (p_t, p_perp_t) = projectors(&u, n)?;
    let sub = TextSubspace { task_id: TaskId(0), rank: u.cols(), u_t: u, p_t, p_perp_t };
    let mut head = CompHead {
        task_id: TaskId(0),
        w_comp: gaussian_matrix(&mut rng, n, 4, 1.0),
        class_order: (0..4).map(ClassId).collect(),
        orthogonal: true,
    };
    let feats: Vec<_> = (0..16).filter_map(|_| gaussian_vector::<f64>(&mut rng, n, 1.0).normalized(1e-12)).collect();
    let labels: Vec<_> = (0..feats.len()).map(|i| ClassId(i % 4)).collect();
    let kappa = 3.0;
    let (_, g) = comp_loss_grad(&feats, &labels, &head, &sub, kappa)?;
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..4 {
            let orig = head.w_comp[(i, j)];
            head.w_comp[(i, j)] = orig + eps;
            let lp = comp_loss(&feats, &labels, &head, &sub, kappa)?;
            head.w_comp[(i, j)] = orig - eps;
            let lm = comp_loss(&feats, &labels, &head, &sub, kappa)?;
            head.w_comp[(i, j)] = orig;
            worst = worst.max(rel_err((lp - lm) / (2.0 * eps), g[(i, j)]));
        }
    }
    Ok(worst)
}

/// Analytic gradients against central differences on 4-class instances.
/// Each loss is isolated: `κ = 0` makes the contrastive term constant.
pub fn gradient_suite() -> Result<(bool, String)> {
    let clip = HyperParams { kappa: 5.0, lambda_anc: 0.0, lambda_sep: 0.0, ..Default::default() };
    let anc = HyperParams { kappa: 0.0, lambda_anc: 1.0, lambda_sep: 0.0, ..Default::default() };
    let sep = HyperParams { kappa: 0.0, lambda_anc: 0.0, lambda_sep: 1.0, tau: 0.0, ..Default::default() };
    let mut worst = [0.0f64; 4];
    for seed in 0..3 {
        worst[0] = worst[0].max(base_grad_error(seed, &clip, |l| l.clip)?);
        worst[1] = worst[1].max(base_grad_error(seed, &anc, |l| l.anc)?);
        worst[2] = worst[2].max(base_grad_error(seed, &sep, |l| l.sep)?);
        worst[3] = worst[3].max(comp_grad_error(seed)?);
    }
    let ok = worst.iter().all(|&w| w < 1e-4);
    Ok((ok, format!("max rel err clip {:.1e} anc {:.1e} sep {:.1e} comp {:.1e}", worst[0], worst[1], worst[2], worst[3])))
}

fn small_run_config() -> ExperimentConfig {
    ExperimentConfig { seed: 11, theory_draws: 0, ..Default::default() }
}

/// Projector algebra, unit features and fusion weights on a trained state.
pub fn projector_suite() -> Result<(bool, String)> {
    let art = run_in_memory(&small_run_config())?;
    let st = &art.state;
    let mut proj: f64 = 0.0;
    for sub in st.subspaces.values() {
        proj = proj.max(sub.p_t.matmul(&sub.p_t).sub(&sub.p_t).max_abs());
        proj = proj.max(sub.p_perp_t.matmul(&sub.p_perp_t).sub(&sub.p_perp_t).max_abs());
        proj = proj.max(sub.p_t.matmul(&sub.p_perp_t).max_abs());
    }
    let mut unit: f64 = 0.0;
    let mut fusion: f64 = 0.0;
    for task in &art.tasks {
        for s in task.val.iter().take(10) {
            for ad in st.visual_adapters.values() {
                unit = unit.max((encode_image(&s.latent, &st.encoder, ad)?.norm() - 1.0).abs());
            }
            let cands: Vec<_> =
                st.seen_classes().iter().map(|&c| encode_text(st.prompt(c)?, &st.encoder, &st.text_adapter)).collect::<Result<_>>()?;
            for t in &cands {
                unit = unit.max((t.norm() - 1.0).abs());
            }
            let f = fused_zero_shot(&s.latent, &cands, st)?;
            fusion = fusion.max((f.weights.values().sum::<f64>() - 1.0).abs());
        }
    }
    let ok = proj < 1e-10 && unit < 1e-12 && fusion < 1e-12;
    Ok((ok, format!("projector defect {proj:.1e}, unit defect {unit:.1e}, weight-sum defect {fusion:.1e}")))
}

/// Exact pairwise count `(2·wins + ties) / (2·n_id·n_ood)`.
fn pairwise_auroc(id: &[f64], ood: &[f64]) -> Ratio<u64> {
    let mut twice = 0u64;
    for &a in id {
        for &b in ood {
            twice += if a > b { 2 } else if a == b { 1 } else { 0 };
        }
    }
    Ratio::new(twice, 2 * id.len() as u64 * ood.len() as u64)
}

pub fn auroc_suite(instances: usize) -> Result<(bool, String)> {
    let mut rng = Rng::from_seed_u64(0xa0c);
    let mut mismatches = 0;
    let mut with_ties = 0;
    for i in 0..instances {
        let n = 2 + rng.below(199);
        let n_id = 1 + rng.below(n - 1);
        let levels = if i % 2 == 0 { 1 + rng.below(6) } else { 0 };
        let draw = |rng: &mut Rng, shift: f64| {
            if levels > 0 {
                rng.below(levels) as f64 / 4.0 + if shift > 0.0 { 0.25 } else { 0.0 }
            } else {
                rng.gaussian() + shift
            }
        };
        let id: Vec<f64> = (0..n_id).map(|_| draw(&mut rng, 0.5)).collect();
        let ood: Vec<f64> = (0..n - n_id).map(|_| draw(&mut rng, 0.0)).collect();
        if id.iter().any(|a| ood.contains(a)) {
            with_ties += 1;
        }
        if auroc_ratio(&id, &ood)? != pairwise_auroc(&id, &ood) {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0 && with_ties > 0, format!("{instances} instances ({with_ties} with ties), {mismatches} mismatches")))
}

/// Byte-identical frozen parameters and anchor preservation on the default run.
pub fn freezing_suite() -> Result<(bool, String)> {
    let cfg = ExperimentConfig { theory_draws: 0, ..Default::default() };
    let r = run_in_memory(&cfg)?.report;
    let ap = r.metrics.anchor_preservation.unwrap_or(f64::NAN);
    let ok = r.failure.is_none() && r.frozen_params_stable && r.frozen_branches_stable && ap >= 0.99;
    Ok((
        ok,
        format!(
            "params stable {}, branches stable {}, anchor preservation {ap:.5} (λ_anc = {})",
            r.frozen_params_stable, r.frozen_branches_stable, cfg.hp.lambda_anc
        ),
    ))
}

/// Full-method and all-off runs of the default benchmark for seeds `0..n`.
pub struct SeedRuns {
    pub full: Vec<RunReport>,
    pub base: Vec<RunReport>,
}

pub fn seed_benchmark(n: u64) -> std::result::Result<SeedRuns, crate::Error> {
    let mut full = Vec::new();
    let mut base = Vec::new();
    for seed in 0..n {
        let cfg = ExperimentConfig { seed, theory_draws: 0, ..Default::default() };
        let mut off = cfg.clone();
        off.ablation.use_anchor_sep = false;
        off.ablation.use_compensation = false;
        off.ablation.use_prototype_term = false;
        full.push(run_in_memory(&cfg)?.report);
        base.push(run_in_memory(&off)?.report);
    }
    Ok(SeedRuns { full, base })
}

fn last_of(r: &RunReport, variant: &str, f: fn(&crate::harness::RoutingCurve) -> Option<f64>) -> Option<f64> {
    r.curve(variant).and_then(f)
}

/// Scoring with the compensation term against the same model with `β = 0`.
pub fn compensation_effect(b: &SeedRuns) -> (bool, String) {
    let n = b.full.len();
    let mut wins = 0;
    let (mut with, mut without) = (0.0, 0.0);
    for r in &b.full {
        let m = |v| last_of(r, v, |c| c.mean_margin.last().copied().flatten());
        if let (Some(a), Some(z)) = (m("full"), m("no_comp")) {
            if a > z {
                wins += 1;
            }
        }
        with += last_of(r, "full", |c| c.routing_acc.last().copied()).unwrap_or(f64::NAN);
        without += last_of(r, "no_comp", |c| c.routing_acc.last().copied()).unwrap_or(f64::NAN);
    }
    let (with, without) = (with / n as f64, without / n as f64);
    let ok = n > 0 && wins * 100 >= 95 * n && with >= without;
    (ok, format!("margin larger in {wins}/{n} seeds; mean final routing {with:.4} vs {without:.4}"))
}

/// Mean Last-Acc over seeds for base, +anchor/sep, +compensation, +prototype.
pub fn ladder_means(b: &SeedRuns) -> [f64; 4] {
    let n = b.full.len() as f64;
    let mut m = [0.0; 4];
    for (f, z) in b.full.iter().zip(&b.base) {
        m[0] += z.metrics.last_acc.unwrap_or(f64::NAN);
        m[1] += last_of(f, "text_only", |c| c.accuracy.last().copied()).unwrap_or(f64::NAN);
        m[2] += last_of(f, "no_proto", |c| c.accuracy.last().copied()).unwrap_or(f64::NAN);
        m[3] += last_of(f, "full", |c| c.accuracy.last().copied()).unwrap_or(f64::NAN);
    }
    m.map(|x| x / n)
}

pub fn ablation_ladder(b: &SeedRuns) -> (bool, String) {
    let m = ladder_means(b);
    let ok = m.windows(2).all(|w| w[1] - w[0] >= 0.0);
    (ok, format!("mean Last-Acc base {:.4} ≤ +anc/sep {:.4} ≤ +comp {:.4} ≤ +proto {:.4}", m[0], m[1], m[2], m[3]))
}

/// With every adapter delta zero, fused scores equal frozen zero-shot scores.
pub fn zero_adapter_fusion() -> Result<(bool, String)> {
    let art = run_in_memory(&small_run_config())?;
    let mut st = art.state;
    for ad in st.visual_adapters.values_mut() {
        ad.b = RealMatrix::zeros(ad.b.rows(), ad.b.cols());
    }
    st.text_adapter.b = RealMatrix::zeros(st.text_adapter.b.rows(), st.text_adapter.b.cols());
    let cands: Vec<_> = st.seen_classes().iter().map(|&c| encode_text_frozen(st.prompt(c)?, &st.encoder)).collect::<Result<_>>()?;
    let mut checked = 0;
    let mut differing = 0;
    let mut nonuniform = false;
    for s in art.tasks.iter().flat_map(|t| &t.val) {
        let v = encode_image_frozen(&s.latent, &st.encoder)?;
        let f = fused_zero_shot(&s.latent, &cands, &st)?;
        let w: Vec<f64> = f.weights.values().copied().collect();
        nonuniform |= w.iter().any(|&x| x != w[0]);
        for (q, t) in f.scores.iter().zip(&cands) {
            checked += 1;
            if q.to_bits() != v.dot(t).to_bits() {
                differing += 1;
            }
        }
    }
    Ok((
        differing == 0 && checked > 0,
        format!("{checked} scores, {differing} differ bitwise (non-uniform weights seen: {nonuniform})"),
    ))
}

pub fn determinism() -> Result<(bool, String)> {
    let cfg = ExperimentConfig { seed: 5, theory_draws: 1, ..Default::default() };
    let a = run_in_memory(&cfg)?.report.to_json()?;
    let b = run_in_memory(&cfg)?.report.to_json()?;
    Ok((a == b, format!("{} report bytes, identical: {}", a.len(), a == b)))
}

/// Prints one line per check and returns whether all passed.
pub fn print_checks(checks: &[Check]) -> bool {
    let mut by_name = BTreeMap::new();
    for c in checks {
        println!("[{}] {}: {} ({:.2}s)", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail, c.seconds);
        by_name.insert(c.name.clone(), c.passed);
    }
    by_name.values().all(|&p| p)
}
