//! Experiment configuration: one JSON document.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context as _, Result};
use minidisc::distiller::DistillConfig;
use minidisc::model::ModelConfig;
use minidisc::scheduler::SchedulePlan;
use serde::{Deserialize, Serialize};

use crate::tasks::{TaskKind, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Minidisc,
    Maxidisc,
    Kd,
    FixedTa,
    Finetune,
}

impl Method {
    pub const ALL: [Method; 5] = [Self::Minidisc, Self::Maxidisc, Self::Kd, Self::FixedTa, Self::Finetune];
    pub const BASELINES: [Method; 3] = [Self::Kd, Self::FixedTa, Self::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            Self::Minidisc => "minidisc",
            Self::Maxidisc => "maxidisc",
            Self::Kd => "kd",
            Self::FixedTa => "fixed-ta",
            Self::Finetune => "finetune",
        }
    }

    pub fn is_baseline(self) -> bool {
        Self::BASELINES.contains(&self)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .with_context(|| format!("unknown method `{s}` (expected one of minidisc, maxidisc, kd, fixed-ta, finetune)"))
    }
}

/// Plain supervised training of the teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { steps: 1500, lr: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub plan: SchedulePlan,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

impl ExperimentConfig {
    /// The capacity-gap suite: a 6-layer teacher, the three tasks, three
    /// seeds and every method.
    pub fn capacity_gap(out_dir: impl Into<PathBuf>) -> Self {
        let model = ModelConfig::capacity_gap_teacher();
        let tasks = TaskKind::ALL
            .iter()
            .enumerate()
            .map(|(i, &kind)| TaskSpec {
                kind,
                vocab: model.vocab,
                length: model.max_len,
                n_classes: 2,
                train_size: 4000,
                dev_size: 1000,
                seed: 100 + i as u64,
            })
            .collect();
        Self {
            model,
            tasks,
            plan: SchedulePlan::default(),
            distill: DistillConfig::default(),
            teacher: TeacherConfig::default(),
            seeds: vec![0, 1, 2],
            out_dir: out_dir.into(),
            methods: default_methods(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every field a run will touch. Messages name the offending
    /// field.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.plan.validate()?;
        self.distill.validate(self.model.d_model)?;
        if self.tasks.is_empty() {
            bail!("tasks: at least one task is required");
        }
        for (i, t) in self.tasks.iter().enumerate() {
            t.validate().with_context(|| format!("tasks[{i}]"))?;
            if t.vocab > self.model.vocab {
                bail!("tasks[{i}].vocab ({}) exceeds model.vocab ({})", t.vocab, self.model.vocab);
            }
            if t.length > self.model.max_len {
                bail!("tasks[{i}].length ({}) exceeds model.max_len ({})", t.length, self.model.max_len);
            }
            if t.n_classes > self.model.n_classes {
                bail!("tasks[{i}].n_classes ({}) exceeds model.n_classes ({})", t.n_classes, self.model.n_classes);
            }
        }
        let mut names: Vec<_> = self.tasks.iter().map(|t| t.kind).collect();
        names.sort_by_key(|k| k.name());
        names.dedup();
        if names.len() != self.tasks.len() {
            bail!("tasks: each task kind may appear once");
        }
        if self.seeds.is_empty() {
            bail!("seeds: at least one seed is required");
        }
        if self.methods.is_empty() {
            bail!("methods: at least one method is required");
        }
        if !(self.teacher.lr > 0.0 && self.teacher.lr.is_finite()) {
            bail!("teacher.lr must be positive");
        }
        Ok(())
    }

    pub fn teacher_distill_config(&self, seed: u64) -> DistillConfig {
        DistillConfig {
            steps: self.teacher.steps,
            lr: self.teacher.lr,
            seed,
            ..self.distill.clone()
        }
    }

    /// Every step count in the config set to `steps`.
    pub fn with_all_steps(mut self, steps: usize) -> Self {
        self.teacher.steps = steps;
        self.plan.sandwich_steps = steps;
        self.plan.ta_steps = steps;
        self.plan.student_steps = steps;
        self.plan.residual_steps = steps;
        self
    }
}
