//! Deterministic synthetic class-incremental streams.
//!
//! Geometry: a random unit "gap direction" `d` is drawn first. Every class
//! gets an image-cluster mean `μ_c ⊥ d`; its prompt latent is
//! `cos(θ)·μ_c + sin(θ)·d`, so all prompts lean toward `d` by the gap angle
//! `θ` while images stay in `d⊥` (image noise is projected off `d` too).
//! That gives two cones separated by `θ`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::ser::SerializeSeq;
use serde::{Deserialize, Serialize, Serializer};

use crate::encoder::ClassPrompt;
use crate::error::{input, Error, Result};
use crate::ids::{ClassId, TaskId};
use crate::numerics::{cosine, RealVector};
use crate::rng::{gaussian_vector, unit_vector, Rng};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    /// Train plus validation samples per class.
    pub samples_per_class: usize,
    pub latent_dim: usize,
    /// Expected norm of the per-sample noise added to a unit class mean.
    pub intra_class_noise: f64,
    /// Angle in radians between each class's image mean and its prompt.
    pub gap_angle: f64,
    /// Norm of a per-class image component orthogonal to the task's prompts.
    /// Zero keeps every image mean inside the prompt span.
    pub image_specific: f64,
    pub val_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_tasks: 5,
            classes_per_task: 4,
            samples_per_class: 40,
            latent_dim: 24,
            intra_class_noise: 1.2,
            gap_angle: 0.7,
            image_specific: 1.0,
            val_fraction: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_tasks < 1 {
            return bad("num_tasks must be at least 1".into());
        }
        if self.classes_per_task < 2 {
            return bad("classes_per_task must be at least 2".into());
        }
        if self.samples_per_class < 2 {
            return bad("samples_per_class must be at least 2 to split train/val".into());
        }
        if self.latent_dim < 2 {
            return bad(format!("latent_dim {} is below the separability floor of 2", self.latent_dim));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} not in (0,1)", self.val_fraction));
        }
        if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&self.gap_angle) {
            return bad(format!("gap_angle {} not in [0, π/2]", self.gap_angle));
        }
        if !(self.image_specific >= 0.0 && self.image_specific.is_finite()) {
            return bad("image_specific must be finite and nonnegative".into());
        }
        if !(self.intra_class_noise >= 0.0 && self.intra_class_noise.is_finite()) {
            return bad("intra_class_noise must be finite and nonnegative".into());
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }

    /// Number of validation samples carved from each class.
    pub fn val_per_class(&self) -> usize {
        let n = (self.val_fraction * self.samples_per_class as f64).round() as usize;
        n.clamp(1, self.samples_per_class - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample<T> {
    pub latent: RealVector<T>,
    pub label: ClassId,
}

/// One incremental task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset<T> {
    pub task_id: TaskId,
    pub class_ids: Vec<ClassId>,
    /// Canonical text latent per class, in `class_ids` order.
    pub prompts: Vec<ClassPrompt<T>>,
    pub train: Vec<Sample<T>>,
    pub val: Vec<Sample<T>>,
}

impl<T: Scalar> TaskDataset<T> {
    pub fn contains(&self, c: ClassId) -> bool {
        self.class_ids.binary_search(&c).is_ok()
    }
}

/// Generates the full task stream from the `data` substream of `seed`.
/// Identical inputs give bit-identical streams.
pub fn generate_task_stream<T: Scalar>(cfg: &SynthConfig, seed: u64) -> Result<Vec<TaskDataset<T>>> {
    cfg.validate()?;
    let dim = cfg.latent_dim;
    let mut rng = Rng::substream(seed, "data", 0);
    let gap_dir: RealVector<f64> = unit_vector(&mut rng, dim);
    let off_gap = |v: &RealVector<f64>| {
        let mut w = v.clone();
        w.axpy(-v.dot(&gap_dir), &gap_dir);
        w
    };

    let total = cfg.total_classes();
    let means: Vec<RealVector<f64>> = (0..total)
        .map(|_| loop {
            let g = off_gap(&gaussian_vector(&mut rng, dim, 1.0));
            if let Some(u) = g.normalized(1e-6) {
                break u;
            }
        })
        .collect();

    let (cos_g, sin_g) = (cfg.gap_angle.cos(), cfg.gap_angle.sin());
    let noise_std = cfg.intra_class_noise / (dim as f64).sqrt();
    let n_val = cfg.val_per_class();

    let mut tasks = Vec::with_capacity(cfg.num_tasks);
    for t in 0..cfg.num_tasks {
        let class_ids: Vec<ClassId> =
            (t * cfg.classes_per_task..(t + 1) * cfg.classes_per_task).map(ClassId).collect();
        let mut prompts = Vec::new();
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut span = vec![gap_dir.clone()];
        for &c in &class_ids {
            let mut prompt = means[c.0].scale(cos_g);
            prompt.axpy(sin_g, &gap_dir);
            push_orthonormal(&mut span, &prompt);
            prompts.push(ClassPrompt { class_id: c, prompt_latent: cast_vec(&prompt) });
        }
        for &c in &class_ids {
            let mut mu = means[c.0].clone();
            if cfg.image_specific > 0.0 {
                let mut b = gaussian_vector(&mut rng, dim, 1.0);
                for e in &span {
                    b.axpy(-b.dot(e), e);
                }
                if let Some(u) = b.normalized(1e-9) {
                    mu.axpy(cfg.image_specific, &u);
                }
            }
            let mut samples: Vec<RealVector<f64>> = (0..cfg.samples_per_class)
                .map(|_| mu.add(&off_gap(&gaussian_vector(&mut rng, dim, noise_std))))
                .collect();
            rng.shuffle(&mut samples);
            for (k, x) in samples.into_iter().enumerate() {
                let s = Sample { latent: cast_vec(&x), label: c };
                if k < n_val {
                    val.push(s);
                } else {
                    train.push(s);
                }
            }
        }
        tasks.push(TaskDataset { task_id: TaskId(t), class_ids, prompts, train, val });
    }
    Ok(tasks)
}

fn push_orthonormal(basis: &mut Vec<RealVector<f64>>, v: &RealVector<f64>) {
    let mut w = v.clone();
    for e in basis.iter() {
        w.axpy(-w.dot(e), e);
    }
    if let Some(u) = w.normalized(1e-9) {
        basis.push(u);
    }
}

fn cast_vec<T: Scalar>(v: &RealVector<f64>) -> RealVector<T> {
    RealVector(v.0.iter().map(|&x| T::of(x)).collect())
}

/// Average image-text cosine similarities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapStats<T> {
    pub sim_all: T,
    pub sim_pos: T,
    /// Absent when there is only one text feature.
    pub sim_neg: Option<T>,
}

/// Mean cosine over all image-text pairs, over matching pairs, and over
/// non-matching pairs. `labels[i]` indexes the text matching image `i`.
pub fn measure_modality_gap<T: Scalar>(
    image_feats: &[RealVector<T>],
    text_feats: &[RealVector<T>],
    labels: &[usize],
) -> Result<GapStats<T>> {
    if image_feats.is_empty() || text_feats.is_empty() {
        return input("modality gap needs at least one image and one text feature");
    }
    if labels.len() != image_feats.len() {
        return input("labels must align with image features");
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= text_feats.len()) {
        return input(format!("label {l} has no text feature"));
    }
    let n_txt = text_feats.len();
    let mut all = T::zero();
    let mut pos = T::zero();
    let mut neg = T::zero();
    for (v, &y) in image_feats.iter().zip(labels) {
        let mut row = T::zero();
        let mut row_neg = T::zero();
        for (j, t) in text_feats.iter().enumerate() {
            let c = cosine(v, t)?;
            row = row + c;
            if j == y {
                pos = pos + c;
            } else {
                row_neg = row_neg + c;
            }
        }
        all = all + row / T::of_usize(n_txt);
        if n_txt > 1 {
            neg = neg + row_neg / T::of_usize(n_txt - 1);
        }
    }
    let n = T::of_usize(image_feats.len());
    Ok(GapStats { sim_all: all / n, sim_pos: pos / n, sim_neg: (n_txt > 1).then(|| neg / n) })
}

/// Checks the cross-task disjointness and label membership invariants.
pub fn check_stream<T: Scalar>(tasks: &[TaskDataset<T>]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for task in tasks {
        for &c in &task.class_ids {
            if !seen.insert(c) {
                return input(format!("{c} appears in more than one task"));
            }
        }
        if let Some(s) = task.train.iter().chain(&task.val).find(|s| !task.contains(s.label)) {
            return input(format!("{} labeled {} outside its class set", task.task_id, s.label));
        }
    }
    Ok(())
}

/// `f64` written with 17 significant digits.
struct Sig17(f64);

impl Serialize for Sig17 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let raw = serde_json::value::RawValue::from_string(format!("{:.16e}", self.0))
            .map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

struct Sig17Vec<'a, T>(&'a RealVector<T>);

impl<T: Scalar> Serialize for Sig17Vec<'_, T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.0.dim()))?;
        for &x in &self.0 .0 {
            seq.serialize_element(&Sig17(x.to_f64_lossy()))?;
        }
        seq.end()
    }
}

#[derive(Serialize)]
struct SampleDump<'a, T: Scalar> {
    latent: Sig17Vec<'a, T>,
    label: ClassId,
}

#[derive(Serialize)]
struct PromptDump<'a, T: Scalar> {
    class_id: ClassId,
    prompt_latent: Sig17Vec<'a, T>,
}

#[derive(Serialize)]
struct TaskDump<'a, T: Scalar> {
    task_id: TaskId,
    class_ids: &'a [ClassId],
    prompts: Vec<PromptDump<'a, T>>,
    train: Vec<SampleDump<'a, T>>,
    val: Vec<SampleDump<'a, T>>,
}

#[derive(Serialize)]
struct StreamDump<'a, T: Scalar> {
    config: &'a SynthConfig,
    seed: u64,
    tasks: Vec<TaskDump<'a, T>>,
}

/// Loaded dataset dump.
#[derive(Debug, Deserialize)]
pub struct StreamFile {
    pub config: SynthConfig,
    pub seed: u64,
    pub tasks: Vec<TaskDataset<f64>>,
}

fn sample_dumps<T: Scalar>(xs: &[Sample<T>]) -> Vec<SampleDump<'_, T>> {
    xs.iter().map(|s| SampleDump { latent: Sig17Vec(&s.latent), label: s.label }).collect()
}

/// Serializes a stream as JSON with every float at 17 significant digits.
pub fn stream_to_json<T: Scalar>(cfg: &SynthConfig, seed: u64, tasks: &[TaskDataset<T>]) -> Result<String> {
    let dump = StreamDump {
        config: cfg,
        seed,
        tasks: tasks
            .iter()
            .map(|t| TaskDump {
                task_id: t.task_id,
                class_ids: &t.class_ids,
                prompts: t
                    .prompts
                    .iter()
                    .map(|p| PromptDump { class_id: p.class_id, prompt_latent: Sig17Vec(&p.prompt_latent) })
                    .collect(),
                train: sample_dumps(&t.train),
                val: sample_dumps(&t.val),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&dump)?)
}

pub fn write_stream<T: Scalar>(path: &Path, cfg: &SynthConfig, seed: u64, tasks: &[TaskDataset<T>]) -> Result<()> {
    std::fs::write(path, stream_to_json(cfg, seed, tasks)?)?;
    Ok(())
}

pub fn read_stream(path: &Path) -> Result<StreamFile> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
