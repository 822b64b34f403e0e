//! Everything a run learns, plus the frozen encoder it learns on.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compensation::{CompHead, TextSubspace};
use crate::encoder::{encode_text, new_adapter, ClassPrompt, FrozenEncoder, LowRankAdapter};
use crate::error::{state_err, Result};
use crate::ids::{ClassId, TaskId};
use crate::numerics::RealVector;
use crate::rng::substream_seed;
use crate::routing::ThresholdBank;
use crate::scalar::Scalar;

/// Text features cached when each class is first learned.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnchorCache<T> {
    pub anchors: BTreeMap<ClassId, RealVector<T>>,
}

impl<T: Scalar> AnchorCache<T> {
    /// Inserts an anchor; a class may only be anchored once.
    pub fn insert_once(&mut self, c: ClassId, z: RealVector<T>) -> Result<()> {
        if self.anchors.contains_key(&c) {
            return state_err(format!("{c} already has a cached anchor"));
        }
        self.anchors.insert(c, z);
        Ok(())
    }

    pub fn get(&self, c: ClassId) -> Option<&RealVector<T>> {
        self.anchors.get(&c)
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Unit visual class prototypes and the task owning each class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank<T> {
    pub prototypes: BTreeMap<ClassId, RealVector<T>>,
    pub class_task: BTreeMap<ClassId, TaskId>,
}

impl<T: Scalar> PrototypeBank<T> {
    pub fn get(&self, c: ClassId) -> Option<&RealVector<T>> {
        self.prototypes.get(&c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState<T> {
    /// Root seed all per-task substreams derive from.
    pub seed: u64,
    pub encoder: FrozenEncoder<T>,
    pub text_adapter: LowRankAdapter<T>,
    pub visual_adapters: BTreeMap<TaskId, LowRankAdapter<T>>,
    pub prompts: BTreeMap<ClassId, ClassPrompt<T>>,
    pub task_classes: BTreeMap<TaskId, Vec<ClassId>>,
    pub anchors: AnchorCache<T>,
    pub prototypes: PrototypeBank<T>,
    pub subspaces: BTreeMap<TaskId, TextSubspace<T>>,
    pub heads: BTreeMap<TaskId, CompHead<T>>,
    pub thresholds: ThresholdBank<T>,
}

impl<T: Scalar> ModelState<T> {
    /// Empty state with a fresh (zero-delta) shared text adapter.
    pub fn new(encoder: FrozenEncoder<T>, lora_rank: usize, seed: u64) -> Self {
        let text_adapter = new_adapter(
            lora_rank,
            encoder.latent_dim(),
            encoder.feature_dim,
            substream_seed(seed, "text-adapter-init", 0),
        );
        Self {
            seed,
            encoder,
            text_adapter,
            visual_adapters: BTreeMap::new(),
            prompts: BTreeMap::new(),
            task_classes: BTreeMap::new(),
            anchors: AnchorCache { anchors: BTreeMap::new() },
            prototypes: PrototypeBank { prototypes: BTreeMap::new(), class_task: BTreeMap::new() },
            subspaces: BTreeMap::new(),
            heads: BTreeMap::new(),
            thresholds: ThresholdBank { thresholds: BTreeMap::new() },
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.feature_dim
    }

    pub fn learned_tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.visual_adapters.keys().copied()
    }

    pub fn num_tasks(&self) -> usize {
        self.visual_adapters.len()
    }

    pub fn classes_of(&self, t: TaskId) -> Result<&[ClassId]> {
        match self.task_classes.get(&t) {
            Some(cs) => Ok(cs),
            None => state_err(format!("no class set registered for {t}")),
        }
    }

    pub fn task_of(&self, c: ClassId) -> Option<TaskId> {
        self.task_classes.iter().find(|(_, cs)| cs.contains(&c)).map(|(&t, _)| t)
    }

    /// Every class registered so far, ascending.
    pub fn seen_classes(&self) -> Vec<ClassId> {
        let mut cs: Vec<ClassId> = self.task_classes.values().flatten().copied().collect();
        cs.sort();
        cs
    }

    pub fn visual_adapter(&self, t: TaskId) -> Result<&LowRankAdapter<T>> {
        match self.visual_adapters.get(&t) {
            Some(a) => Ok(a),
            None => state_err(format!("missing visual adapter for {t}")),
        }
    }

    pub fn prompt(&self, c: ClassId) -> Result<&ClassPrompt<T>> {
        match self.prompts.get(&c) {
            Some(p) => Ok(p),
            None => state_err(format!("missing prompt for {c}")),
        }
    }

    /// Current shared-adapter text feature of each requested class.
    pub fn text_features(&self, classes: &[ClassId]) -> Result<BTreeMap<ClassId, RealVector<T>>> {
        classes
            .iter()
            .map(|&c| Ok((c, encode_text(self.prompt(c)?, &self.encoder, &self.text_adapter)?)))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
