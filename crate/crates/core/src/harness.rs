//! Experiment orchestration: config parsing, full runs over a task stream,
//! ablation variants, theory audits, sweeps and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compensation::{build_text_subspace, train_comp_head, CompHead, CompOptions};
use crate::encoder::{encode_image_frozen, encode_text_frozen, FrozenEncoder};
use crate::error::{Error, Result};
use crate::ids::{ClassId, TaskId};
use crate::metrics::{
    accuracy_curve, anchor_preservation, auroc, margin_stats, parameter_count, sample_margin, subspace_distances,
    ParamCounts, StageMetrics, SubspaceDistanceReport,
};
use crate::numerics::{RealMatrix, RealVector};
use crate::rng::substream_seed;
use crate::routing::{calibrate_thresholds, detect_unknown, predict, routing_accuracy, Scorer};
use crate::state::ModelState;
use crate::synthdata::{generate_task_stream, measure_modality_gap, GapStats, Sample, SynthConfig, TaskDataset};
use crate::theory::{audit_pipeline_theory, AuditMode, TheoryReport, WStarSource};
use crate::training::{cache_anchors_and_prototypes, task_features, train_task_stage1, HyperParams};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub use_anchor_sep: bool,
    pub use_compensation: bool,
    pub use_prototype_term: bool,
    pub orth_constraint: bool,
    pub proto_init: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { use_anchor_sep: true, use_compensation: true, use_prototype_term: true, orth_constraint: true, proto_init: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    /// `report.json`
    Json,
    /// `curves.csv`, `routing_curves.csv`, `training_log.csv`
    Csv,
    /// `inference.jsonl`
    Jsonl,
    /// `checkpoint.json`
    Checkpoint,
}

fn all_formats() -> BTreeSet<ReportFormat> {
    [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Jsonl, ReportFormat::Checkpoint].into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root of every random substream.
    pub seed: u64,
    pub feature_dim: usize,
    /// Relative perturbation of the frozen image branch against the text
    /// branch.
    pub encoder_distortion: f64,
    /// Random `W*` draws per task in the run report's theory section.
    pub theory_draws: usize,
    pub synth: SynthConfig,
    pub hp: HyperParams,
    pub ablation: AblationFlags,
    pub output_dir: Option<PathBuf>,
    pub report_formats: BTreeSet<ReportFormat>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            feature_dim: 24,
            encoder_distortion: 0.3,
            theory_draws: 1,
            synth: SynthConfig::default(),
            hp: HyperParams::default(),
            ablation: AblationFlags::default(),
            output_dir: None,
            report_formats: all_formats(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.hp.validate()?;
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !(self.encoder_distortion >= 0.0 && self.encoder_distortion.is_finite()) {
            return Err(Error::Config("encoder_distortion must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Hyperparameters with the ablation flags applied: anchor and
    /// separation weights, `beta` and `gamma` are zeroed when their
    /// component is disabled.
    pub fn effective_hp(&self) -> HyperParams {
        let mut hp = self.hp.clone();
        if !self.ablation.use_anchor_sep {
            hp.lambda_anc = 0.0;
            hp.lambda_sep = 0.0;
        }
        if !self.ablation.use_compensation {
            hp.beta = 0.0;
        }
        if !self.ablation.use_prototype_term {
            hp.gamma = 0.0;
        }
        hp
    }

    pub fn comp_options(&self) -> CompOptions {
        CompOptions { orth_constraint: self.ablation.orth_constraint, proto_init: self.ablation.proto_init }
    }
}

/// Per-stage metrics of one inference variant on the same trained state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingCurve {
    pub variant: String,
    pub beta: f64,
    pub gamma: f64,
    pub accuracy: Vec<f64>,
    pub routing_acc: Vec<f64>,
    pub mean_margin: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_stage: Vec<StageMetrics>,
    pub avg_acc: Option<f64>,
    pub last_acc: Option<f64>,
    pub anchor_preservation: Option<f64>,
    pub subspace_distances: SubspaceDistanceReport,
    pub param_counts: ParamCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub task: TaskId,
    pub source: WStarSource,
    pub mode: AuditMode,
    pub report: TheoryReport<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    /// Task being trained or evaluated when the run failed.
    pub stage: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub cilab: String,
    pub report_schema: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// Frozen encoder on all validation samples against all prompts.
    pub frozen: GapStats<f64>,
    /// Each sample through its own task's adapter against the final text
    /// features.
    pub adapted: Option<GapStats<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub versions: Versions,
    pub metrics: MetricsReport,
    pub routing_curves: Vec<RoutingCurve>,
    pub theory: Vec<AuditRecord>,
    pub modality_gap: GapReport,
    /// Every earlier task's visual features are bit-identical after all
    /// later tasks were trained.
    pub frozen_branches_stable: bool,
    /// Every learned task's adapter, anchors, head and prototypes are byte-identical
    /// to their values when that task finished.
    pub frozen_params_stable: bool,
    pub failure: Option<FailureRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub avg_acc: f64,
    pub last_acc: f64,
    pub routing_acc: f64,
}

impl RunReport {
    pub fn summary(&self) -> Option<RunSummary> {
        Some(RunSummary {
            avg_acc: self.metrics.avg_acc?,
            last_acc: self.metrics.last_acc?,
            routing_acc: self.metrics.per_stage.last()?.routing_acc,
        })
    }

    pub fn curve(&self, variant: &str) -> Option<&RoutingCurve> {
        self.routing_curves.iter().find(|c| c.variant == variant)
    }

    /// True when the run completed and every contracted run-level check
    /// passed.
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.frozen_branches_stable && self.frozen_params_stable && self.theory.iter().all(|r| r.report.all_hold())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLogRow {
    pub task: usize,
    pub stage: u8,
    pub epoch: usize,
    pub l_clip: Option<f64>,
    pub l_anc: Option<f64>,
    pub l_sep: Option<f64>,
    pub l_comp: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub sample_id: usize,
    pub true_class: ClassId,
    pub pred_class: ClassId,
    pub pred_task: TaskId,
    pub true_task: TaskId,
    pub msp_per_task: BTreeMap<TaskId, f64>,
    pub margin: Option<f64>,
    pub unknown_flag: bool,
}

/// Everything a run produces, before anything is written.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub state: ModelState<f64>,
    pub tasks: Vec<TaskDataset<f64>>,
    pub training_log: Vec<TrainingLogRow>,
    pub inference: Vec<InferenceRecord>,
}

/// An inference variant: name, `beta`, `gamma`.
type Variant = (&'static str, f64, f64);

fn variants(hp: &HyperParams, has_heads: bool) -> Vec<Variant> {
    let mut v = vec![("text_only", 0.0, 0.0), ("no_comp", 0.0, hp.gamma)];
    if has_heads {
        v.push(("no_proto", hp.beta, 0.0));
        v.push(("full", hp.beta, hp.gamma));
    }
    v
}

/// Branch features of every validation sample of the given tasks.
fn branch_features(tasks: &[TaskDataset<f64>], scorer: &Scorer<'_, f64>) -> Result<Features> {
    let mut out = Vec::new();
    for task in tasks {
        for s in &task.val {
            out.push((s.label, scorer.branch_features(&s.latent)?));
        }
    }
    Ok(out)
}

fn max_msp(msp: &BTreeMap<TaskId, f64>) -> f64 {
    msp.values().copied().fold(f64::NEG_INFINITY, f64::max)
}

type Features = Vec<(ClassId, BTreeMap<TaskId, RealVector<f64>>)>;

/// Accuracy, routing accuracy and mean margin of one scorer.
fn variant_point(scorer: &Scorer<'_, f64>, id: &Features, class_task: &BTreeMap<ClassId, TaskId>) -> Result<(f64, f64, Option<f64>)> {
    let mut preds = Vec::with_capacity(id.len());
    let mut bds = Vec::with_capacity(id.len());
    for (_, f) in id {
        let bd = scorer.score_features(f)?;
        preds.push(predict(&bd));
        bds.push(bd);
    }
    let labels: Vec<ClassId> = id.iter().map(|(y, _)| *y).collect();
    let acc = preds.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64;
    let routing = routing_accuracy(&preds, &labels, class_task)?;
    let margin = margin_stats(&bds, &labels, class_task)?.map(|m| m.mean_margin);
    Ok((acc, routing, margin))
}

struct Stage {
    metrics: StageMetrics,
    curves: Vec<(Variant, f64, f64, Option<f64>)>,
}

fn evaluate_stage(stage: usize, tasks: &[TaskDataset<f64>], state: &ModelState<f64>, hp: &HyperParams) -> Result<Stage> {
    let scorer = Scorer::from_hp(state, hp)?;
    let seen = &tasks[..=stage];
    let id = branch_features(seen, &scorer)?;
    let class_task = state.prototypes.class_task.clone();

    let mut curves = Vec::new();
    for v in variants(hp, state.heads.len() == state.num_tasks()) {
        let s = scorer.with_weights(v.1, v.2)?;
        let (acc, routing, margin) = variant_point(&s, &id, &class_task)?;
        curves.push((v, acc, routing, margin));
    }

    let (a_t, routing_acc, mean_margin) = variant_point(&scorer, &id, &class_task)?;
    let auroc = if stage + 1 < tasks.len() {
        let ood = branch_features(&tasks[stage + 1..], &scorer)?;
        let id_scores = id
            .iter()
            .map(|(_, f)| Ok(max_msp(&scorer.score_features(f)?.msp)))
            .collect::<Result<Vec<f64>>>()?;
        let ood_scores = ood
            .iter()
            .map(|(_, f)| Ok(max_msp(&scorer.score_features(f)?.msp)))
            .collect::<Result<Vec<f64>>>()?;
        Some(auroc(&id_scores, &ood_scores)?)
    } else {
        None
    };
    Ok(Stage { metrics: StageMetrics { t: stage, a_t, auroc, routing_acc, mean_margin }, curves })
}

fn inference_dump(tasks: &[TaskDataset<f64>], state: &ModelState<f64>, hp: &HyperParams) -> Result<Vec<InferenceRecord>> {
    let scorer = Scorer::from_hp(state, hp)?;
    let class_task = &state.prototypes.class_task;
    let mut out = Vec::new();
    for (sample_id, (y, f)) in branch_features(tasks, &scorer)?.into_iter().enumerate() {
        let bd = scorer.score_features(&f)?;
        let pred = predict(&bd);
        out.push(InferenceRecord {
            sample_id,
            true_class: y,
            pred_class: pred,
            pred_task: class_task[&pred],
            true_task: class_task[&y],
            msp_per_task: bd.msp.clone(),
            margin: sample_margin(&bd, y, class_task)?,
            unknown_flag: detect_unknown(&bd, &state.thresholds).is_empty(),
        });
    }
    Ok(out)
}

fn labels_of(samples: &[Sample<f64>], index: &BTreeMap<ClassId, usize>) -> Vec<usize> {
    samples.iter().map(|s| index[&s.label]).collect()
}

/// Frozen encoder on every validation sample against every prompt.
fn frozen_gap(tasks: &[TaskDataset<f64>], enc: &FrozenEncoder<f64>) -> Result<GapStats<f64>> {
    let prompts: Vec<_> = tasks.iter().flat_map(|t| &t.prompts).collect();
    let index: BTreeMap<ClassId, usize> = prompts.iter().enumerate().map(|(i, p)| (p.class_id, i)).collect();
    let texts = prompts.iter().map(|p| encode_text_frozen(p, enc)).collect::<Result<Vec<_>>>()?;
    let mut imgs = Vec::new();
    let mut labels = Vec::new();
    for t in tasks {
        for s in &t.val {
            imgs.push(encode_image_frozen(&s.latent, enc)?);
        }
        labels.extend(labels_of(&t.val, &index));
    }
    measure_modality_gap(&imgs, &texts, &labels)
}

/// Each learned task's validation samples through its own adapter against
/// the current text features of all seen classes.
fn adapted_gap(tasks: &[TaskDataset<f64>], state: &ModelState<f64>) -> Result<GapStats<f64>> {
    let classes = state.seen_classes();
    let index: BTreeMap<ClassId, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let tf = state.text_features(&classes)?;
    let texts: Vec<RealVector<f64>> = classes.iter().map(|c| tf[c].clone()).collect();
    let mut imgs = Vec::new();
    let mut labels = Vec::new();
    for t in tasks {
        imgs.extend(task_features(&t.val, t.task_id, state)?);
        labels.extend(labels_of(&t.val, &index));
    }
    measure_modality_gap(&imgs, &texts, &labels)
}

/// State with a zero compensation head for every task that has a text
/// subspace but no head.
fn with_zero_heads(state: &ModelState<f64>) -> ModelState<f64> {
    let mut st = state.clone();
    for (&t, sub) in &state.subspaces {
        if !st.heads.contains_key(&t) {
            let classes = st.task_classes[&t].clone();
            st.heads.insert(
                t,
                CompHead {
                    task_id: t,
                    w_comp: RealMatrix::zeros(sub.p_t.rows(), classes.len()),
                    class_order: classes,
                    orthogonal: true,
                },
            );
        }
    }
    st
}

fn audit_records(
    state: &ModelState<f64>,
    tasks: &[TaskDataset<f64>],
    draws: usize,
    mode: AuditMode,
    hp: &HyperParams,
) -> Result<Vec<AuditRecord>> {
    let st = with_zero_heads(state);
    let mut out = Vec::new();
    for task in tasks.iter().filter(|t| st.heads.contains_key(&t.task_id)) {
        let sources = (0..draws as u64).map(|draw| WStarSource::Random { draw }).chain([WStarSource::RidgeFit]);
        for source in sources {
            let report = audit_pipeline_theory(&st, task, source, mode, hp.ridge_lambda)?;
            out.push(AuditRecord { task: task.task_id, source, mode, report });
        }
    }
    Ok(out)
}

/// Serialized visual adapter, anchors and head of one task.
fn frozen_params_json(task: &TaskDataset<f64>, state: &ModelState<f64>) -> Result<String> {
    let anchors: Vec<_> = task.class_ids.iter().map(|&c| state.anchors.get(c)).collect();
    let v = serde_json::json!({
        "adapter": state.visual_adapter(task.task_id)?,
        "anchors": anchors,
        "head": state.heads.get(&task.task_id),
        "prototypes": task.class_ids.iter().map(|&c| state.prototypes.get(c)).collect::<Vec<_>>(),
    });
    Ok(v.to_string())
}

/// Trains the stream task by task (stage 1, caches, stage 2) and evaluates after every
/// task. Nothing is written to disk.
pub fn run_in_memory(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let hp = cfg.effective_hp();
    let tasks: Vec<TaskDataset<f64>> = generate_task_stream(&cfg.synth, cfg.seed)?;
    let encoder = FrozenEncoder::random(
        cfg.synth.latent_dim,
        cfg.feature_dim,
        cfg.encoder_distortion,
        substream_seed(cfg.seed, "encoder", 0),
    )?;
    let mut state = ModelState::new(encoder, hp.lora_rank, cfg.seed);
    let mut training_log = Vec::new();
    let mut per_stage = Vec::new();
    let mut curve_points: Vec<Vec<(Variant, f64, f64, Option<f64>)>> = Vec::new();
    let mut branch_snapshots: Vec<Vec<RealVector<f64>>> = Vec::new();
    let mut param_snapshots: Vec<String> = Vec::new();
    let mut failure = None;

    for (k, task) in tasks.iter().enumerate() {
        let step = (|| -> Result<()> {
            for r in train_task_stage1(task, &mut state, &hp)? {
                training_log.push(TrainingLogRow {
                    task: r.task,
                    stage: 1,
                    epoch: r.epoch,
                    l_clip: Some(r.l_clip),
                    l_anc: Some(r.l_anc),
                    l_sep: Some(r.l_sep),
                    l_comp: None,
                    total: r.total,
                });
            }
            cache_anchors_and_prototypes(task, &mut state)?;
            if cfg.ablation.use_compensation {
                for (epoch, l) in train_comp_head(task, &mut state, &hp, cfg.comp_options())?.into_iter().enumerate() {
                    training_log.push(TrainingLogRow {
                        task: task.task_id.0,
                        stage: 2,
                        epoch,
                        l_clip: None,
                        l_anc: None,
                        l_sep: None,
                        l_comp: Some(l),
                        total: l,
                    });
                }
            } else {
                let classes = state.classes_of(task.task_id)?.to_vec();
                let tf = state.text_features(&classes)?;
                let cols: Vec<_> = classes.iter().map(|c| tf[c].clone()).collect();
                let sub = build_text_subspace(task.task_id, &cols, state.feature_dim(), hp.rank_rel_tol)?;
                state.subspaces.insert(task.task_id, sub);
            }
            state.thresholds = calibrate_thresholds(&tasks[..=k], &state, &hp, hp.threshold_quantile)?;
            branch_snapshots.push(task_features(&task.val, task.task_id, &state)?);
            param_snapshots.push(frozen_params_json(task, &state)?);
            let stage = evaluate_stage(k, &tasks, &state, &hp)?;
            per_stage.push(stage.metrics);
            curve_points.push(stage.curves);
            Ok(())
        })();
        if let Err(e) = step {
            failure = Some(FailureRecord { stage: k, error: e.to_string() });
            break;
        }
    }

    let mut frozen_branches_stable = true;
    for (task, snap) in tasks.iter().zip(&branch_snapshots) {
        frozen_branches_stable &= task_features(&task.val, task.task_id, &state).ok().as_ref() == Some(snap);
    }

    let frozen_params_stable =
        tasks.iter().zip(&param_snapshots).all(|(t, snap)| frozen_params_json(t, &state).ok().as_ref() == Some(snap));

    let mut routing_curves: Vec<RoutingCurve> = Vec::new();
    for points in &curve_points {
        for &((name, beta, gamma), acc, routing, margin) in points {
            let idx = match routing_curves.iter().position(|c| c.variant == name) {
                Some(i) => i,
                None => {
                    routing_curves.push(RoutingCurve {
                        variant: name.to_string(),
                        beta,
                        gamma,
                        accuracy: Vec::new(),
                        routing_acc: Vec::new(),
                        mean_margin: Vec::new(),
                    });
                    routing_curves.len() - 1
                }
            };
            let c = &mut routing_curves[idx];
            c.accuracy.push(acc);
            c.routing_acc.push(routing);
            c.mean_margin.push(margin);
        }
    }

    let acc: Vec<f64> = per_stage.iter().map(|s: &StageMetrics| s.a_t).collect();
    let curve = accuracy_curve(&acc).ok();
    let done = &tasks[..per_stage.len()];
    let post = || -> Result<_> {
        if done.is_empty() {
            return Ok((SubspaceDistanceReport::default(), Vec::new(), None, Vec::new()));
        }
        Ok((
            subspace_distances(done, &state)?,
            audit_records(&state, done, cfg.theory_draws, AuditMode::Live, &hp)?,
            Some(adapted_gap(done, &state)?),
            inference_dump(done, &state, &hp)?,
        ))
    };
    let (distances, theory, adapted, inference) = match post() {
        Ok(x) => x,
        Err(e) => {
            failure.get_or_insert(FailureRecord { stage: per_stage.len(), error: e.to_string() });
            (SubspaceDistanceReport::default(), Vec::new(), None, Vec::new())
        }
    };
    let frozen = frozen_gap(&tasks, &state.encoder)?;

    let report = RunReport {
        config: cfg.clone(),
        seed: cfg.seed,
        versions: Versions { cilab: env!("CARGO_PKG_VERSION").to_string(), report_schema: REPORT_SCHEMA },
        metrics: MetricsReport {
            per_stage,
            avg_acc: curve.as_ref().map(|c| c.avg_acc),
            last_acc: curve.as_ref().map(|c| c.last_acc),
            anchor_preservation: anchor_preservation(&state).ok(),
            subspace_distances: distances,
            param_counts: parameter_count(&state),
        },
        routing_curves,
        theory,
        modality_gap: GapReport { frozen, adapted },
        frozen_branches_stable,
        frozen_params_stable,
        failure,
    };
    Ok(RunArtifacts { report, state, tasks, training_log, inference })
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct CurveRow {
    t: usize,
    #[serde(rename = "A_t")]
    a_t: f64,
    auroc: Option<f64>,
    routing_acc: f64,
    mean_margin: Option<f64>,
}

#[derive(Serialize)]
struct VariantRow<'a> {
    variant: &'a str,
    t: usize,
    beta: f64,
    gamma: f64,
    accuracy: f64,
    routing_acc: f64,
    mean_margin: Option<f64>,
}

/// Writes the selected report files into `dir`.
pub fn write_outputs(art: &RunArtifacts, dir: &Path, formats: &BTreeSet<ReportFormat>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if formats.contains(&ReportFormat::Json) {
        let p = dir.join("report.json");
        std::fs::write(&p, art.report.to_json()?)?;
        written.push(p);
    }
    if formats.contains(&ReportFormat::Csv) {
        let rows: Vec<CurveRow> = art
            .report
            .metrics
            .per_stage
            .iter()
            .map(|s| CurveRow { t: s.t, a_t: s.a_t, auroc: s.auroc, routing_acc: s.routing_acc, mean_margin: s.mean_margin })
            .collect();
        let p = dir.join("curves.csv");
        write_csv(&p, &rows)?;
        written.push(p);
        let mut vrows = Vec::new();
        for c in &art.report.routing_curves {
            for t in 0..c.accuracy.len() {
                vrows.push(VariantRow {
                    variant: &c.variant,
                    t,
                    beta: c.beta,
                    gamma: c.gamma,
                    accuracy: c.accuracy[t],
                    routing_acc: c.routing_acc[t],
                    mean_margin: c.mean_margin[t],
                });
            }
        }
        let p = dir.join("routing_curves.csv");
        write_csv(&p, &vrows)?;
        written.push(p);
        let p = dir.join("training_log.csv");
        write_csv(&p, &art.training_log)?;
        written.push(p);
    }
    if formats.contains(&ReportFormat::Jsonl) {
        let mut text = String::new();
        for r in &art.inference {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        let p = dir.join("inference.jsonl");
        std::fs::write(&p, text)?;
        written.push(p);
    }
    if formats.contains(&ReportFormat::Checkpoint) {
        let p = dir.join("checkpoint.json");
        art.state.save(&p)?;
        written.push(p);
    }
    Ok(written)
}

/// Full run; writes outputs when the config names an output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let art = run_in_memory(cfg)?;
    if let Some(dir) = &cfg.output_dir {
        write_outputs(&art, dir, &cfg.report_formats)?;
    }
    Ok(art.report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditOutcome {
    pub seed: u64,
    pub draws: usize,
    pub records: Vec<AuditRecord>,
    pub all_pass: bool,
}

/// Trains the stream, then audits every task with `draws` random `W*` and
/// one ridge-fit `W*`. Tasks trained without compensation are audited
/// with a zero head.
pub fn run_theory_audit(cfg: &ExperimentConfig, draws: usize, mode: AuditMode) -> Result<AuditOutcome> {
    if draws == 0 {
        return Err(Error::Config("draws must be at least 1".into()));
    }
    let art = run_in_memory(&ExperimentConfig { theory_draws: 0, ..cfg.clone() })?;
    if let Some(f) = &art.report.failure {
        return Err(Error::State(format!("training failed at stage {}: {}", f.stage, f.error)));
    }
    let records = audit_records(&art.state, &art.tasks, draws, mode, &cfg.effective_hp())?;
    let all_pass = records.iter().all(|r| match mode {
        AuditMode::Live => r.report.all_hold(),
        AuditMode::Equality => r.report.all_hold() && r.report.lemma1_gap.abs() < crate::theory::theory_tol::<f64>(),
    });
    let out = AuditOutcome { seed: cfg.seed, draws, records, all_pass };
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("theory_audit.json"), serde_json::to_string_pretty(&out)?)?;
    }
    Ok(out)
}

/// Sweep grid: seeds and named axes. Bare axis names address `hp`
/// fields first, then top-level fields; dotted names (`synth.gap_angle`)
/// address nested fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub axes: BTreeMap<String, Vec<f64>>,
}

impl SweepGrid {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let g: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if g.axes.is_empty() || g.axes.values().any(|v| v.is_empty()) {
            return Err(Error::Config("sweep grid needs at least one nonempty axis".into()));
        }
        Ok(g)
    }

    /// Cartesian product of the axes, axis names in sorted order.
    pub fn points(&self) -> Vec<BTreeMap<String, f64>> {
        let mut pts = vec![BTreeMap::new()];
        for (name, values) in &self.axes {
            pts = pts
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.insert(name.clone(), v);
                        q
                    })
                })
                .collect();
        }
        pts
    }
}

fn set_path(root: &mut serde_json::Value, name: &str, value: f64) -> Result<()> {
    let path: Vec<&str> = if name.contains('.') {
        name.split('.').collect()
    } else if root["hp"].get(name).is_some() {
        vec!["hp", name]
    } else {
        vec![name]
    };
    let mut node = root;
    for key in &path {
        node = node.get_mut(*key).ok_or_else(|| Error::Config(format!("unknown sweep axis {name}")))?;
    }
    *node = match node {
        serde_json::Value::Number(n) if n.is_u64() => {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(Error::Config(format!("axis {name} needs nonnegative integers, got {value}")));
            }
            serde_json::Value::from(value as u64)
        }
        serde_json::Value::Number(_) => serde_json::Value::from(value),
        serde_json::Value::Bool(_) => serde_json::Value::Bool(value != 0.0),
        _ => return Err(Error::Config(format!("axis {name} is not numeric"))),
    };
    Ok(())
}

/// `cfg` with every axis value of `point` applied.
pub fn apply_point(cfg: &ExperimentConfig, point: &BTreeMap<String, f64>) -> Result<ExperimentConfig> {
    let mut v = serde_json::to_value(cfg)?;
    for (name, &x) in point {
        set_path(&mut v, name, x)?;
    }
    let out: ExperimentConfig = serde_json::from_value(v)?;
    out.validate()?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub params: BTreeMap<String, f64>,
    pub seed: u64,
    pub avg_acc: f64,
    pub last_acc: f64,
    pub routing_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub params: BTreeMap<String, f64>,
    pub runs: usize,
    pub avg_acc: MeanStd,
    pub last_acc: MeanStd,
    pub routing_acc: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

/// Aggregates rows sharing the same parameters.
pub fn summarize(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut groups: Vec<(BTreeMap<String, f64>, Vec<&SweepRow>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|(p, _)| *p == r.params) {
            Some((_, g)) => g.push(r),
            None => groups.push((r.params.clone(), vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(params, g)| {
            let col = |f: fn(&SweepRow) -> f64| MeanStd::of(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            SweepSummary {
                params,
                runs: g.len(),
                avg_acc: col(|r| r.avg_acc),
                last_acc: col(|r| r.last_acc),
                routing_acc: col(|r| r.routing_acc),
            }
        })
        .collect()
}

/// One full run per grid point per seed.
pub fn run_sweep(cfg: &ExperimentConfig, grid: &SweepGrid) -> Result<SweepTable> {
    let seeds = if grid.seeds.is_empty() { vec![cfg.seed] } else { grid.seeds.clone() };
    let mut rows = Vec::new();
    for point in grid.points() {
        for &seed in &seeds {
            let run_cfg = ExperimentConfig { seed, output_dir: None, ..apply_point(cfg, &point)? };
            let report = run_in_memory(&run_cfg)?.report;
            if let Some(f) = &report.failure {
                return Err(Error::State(format!("sweep run {point:?} seed {seed} failed at stage {}: {}", f.stage, f.error)));
            }
            let s = report.summary().expect("completed run has a summary");
            rows.push(SweepRow { params: point.clone(), seed, avg_acc: s.avg_acc, last_acc: s.last_acc, routing_acc: s.routing_acc });
        }
    }
    let table = SweepTable { summary: summarize(&rows), rows };
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&table)?)?;
        let flat: Vec<BTreeMap<String, String>> = table
            .rows
            .iter()
            .map(|r| {
                let mut m: BTreeMap<String, String> = r.params.iter().map(|(k, v)| (k.clone(), v.to_string())).collect();
                m.insert("seed".into(), r.seed.to_string());
                m.insert("avg_acc".into(), r.avg_acc.to_string());
                m.insert("last_acc".into(), r.last_acc.to_string());
                m.insert("routing_acc".into(), r.routing_acc.to_string());
                m
            })
            .collect();
        let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
        if let Some(first) = flat.first() {
            w.write_record(first.keys())?;
        }
        for m in &flat {
            w.write_record(m.values())?;
        }
        w.flush()?;
    }
    Ok(table)
}
