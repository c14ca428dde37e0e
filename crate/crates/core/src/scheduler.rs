//! Teacher-assistant scheduling: tradeoff scores, one-trial selection over a
//! shared candidate grid, and the enumeration and fixed-schedule baselines.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distiller::{
    distill, evaluate, evaluate_candidates, sandwich_train, train, DistillConfig, EvalRecord, SandwichReport,
    TargetCache, Target, Teacher,
};
use crate::error::{invalid, Result};
use crate::model::{ParamStore, StructureMask};
use crate::pruner::{
    grid_from_ranking, grid_targets, importance_scores, normalize_scores, rank, structure_at_scale, CandidateGrid,
    ImportanceTable, RankMode,
};

pub use crate::ledger::{Phase, PhaseCount, TrialLedger};

/// λ values of the stability sweep.
pub const LAMBDA_SWEEP: [f64; 5] = [0.1, 0.2, 0.3, 0.5, 0.7];
pub const DEFAULT_LAMBDA: f64 = 0.2;
const TIE_TOL: f64 = 1e-12;

/// `m + λ(1 − s)`.
pub fn lambda_tradeoff(metric: f64, scale: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&metric) {
        return Err(invalid(format!("metric {metric} outside [0, 1]")));
    }
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(invalid(format!("scale {scale} outside (0, 1]")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(metric + lambda * (1.0 - scale))
}

/// Negative forward difference `−(m_{i+1} − m_i)/Δs` for records sorted by
/// ascending scale. The last entry has no forward neighbour and gets `None`.
pub fn nd_tradeoff(metrics: &[f64], scales: &[f64]) -> Result<Vec<Option<f64>>> {
    if metrics.len() != scales.len() {
        return Err(invalid(format!("{} metrics for {} scales", metrics.len(), scales.len())));
    }
    if metrics.len() < 2 {
        return Err(invalid("nd tradeoff needs at least two records"));
    }
    let delta = scales[1] - scales[0];
    if !(delta > 0.0) {
        return Err(invalid("scales must be strictly increasing"));
    }
    for w in scales.windows(2) {
        if ((w[1] - w[0]) - delta).abs() > 1e-9 {
            return Err(invalid(format!("non-uniform scale spacing: {} vs {delta}", w[1] - w[0])));
        }
    }
    let mut out: Vec<Option<f64>> = metrics.windows(2).map(|w| Some(-(w[1] - w[0]) / delta)).collect();
    out.push(None);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Lambda,
    Nd,
}

impl std::str::FromStr for Selection {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lambda" => Ok(Selection::Lambda),
            "nd" => Ok(Selection::Nd),
            _ => Err(format!("unknown selection mode {s:?} (expected lambda or nd)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRecord {
    pub candidate_index: usize,
    pub scale: f64,
    pub achieved_scale: f64,
    pub metric: f64,
    pub lambda: f64,
    pub t_lambda: f64,
    pub t_nd: Option<f64>,
}

/// Tradeoff table over evaluated grid entries, keyed by their target scales.
pub fn tradeoff_records(evals: &[EvalRecord], lambda: f64) -> Result<Vec<TradeoffRecord>> {
    let metrics: Vec<f64> = evals.iter().map(|e| e.metric).collect();
    let scales: Vec<f64> = evals.iter().map(|e| e.target_scale).collect();
    let nd = if evals.len() >= 2 { nd_tradeoff(&metrics, &scales)? } else { vec![None; evals.len()] };
    evals
        .iter()
        .zip(nd)
        .map(|(e, t_nd)| {
            Ok(TradeoffRecord {
                candidate_index: e.candidate_index,
                scale: e.target_scale,
                achieved_scale: e.achieved_scale,
                metric: e.metric,
                lambda,
                t_lambda: lambda_tradeoff(e.metric, e.target_scale, lambda)?,
                t_nd,
            })
        })
        .collect()
}

/// Position in `records` with the best tradeoff; ties go to the smaller
/// scale. In ND mode entries without a value are skipped; if none has one,
/// the largest-scale record is returned.
pub fn select_optimal(records: &[TradeoffRecord], selection: Selection) -> Result<usize> {
    if records.is_empty() {
        return Err(invalid("no records to select from"));
    }
    let score = |r: &TradeoffRecord| match selection {
        Selection::Lambda => Some(r.t_lambda),
        Selection::Nd => r.t_nd,
    };
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in records.iter().enumerate() {
        let Some(t) = score(r) else { continue };
        best = match best {
            None => Some((i, t)),
            Some((bi, bt)) => {
                let smaller = r.scale < records[bi].scale;
                if t > bt + TIE_TOL || ((t - bt).abs() <= TIE_TOL && smaller) {
                    Some((i, t))
                } else {
                    Some((bi, bt))
                }
            }
        };
    }
    Ok(match best {
        Some((i, _)) => i,
        None => (0..records.len()).max_by(|&a, &b| records[a].scale.total_cmp(&records[b].scale)).unwrap(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulePlan {
    pub student_scale: f64,
    pub grid_n: usize,
    pub lambda: f64,
    pub selection: Selection,
    pub residual: bool,
    pub residual_steps: usize,
    /// Teacher assistants chained between teacher and student.
    pub ta_hops: usize,
    /// Re-distill the chosen assistant standalone before the final step
    /// instead of reusing its sandwich-trained shared weights.
    pub standalone_ta: bool,
    pub rank_mode: RankMode,
    pub sandwich_steps: usize,
    pub ta_steps: usize,
    pub student_steps: usize,
    pub importance_batches: usize,
    pub importance_batch_size: usize,
    pub fixed_ta_scale: f64,
}

impl Default for SchedulePlan {
    fn default() -> Self {
        Self {
            student_scale: 0.1,
            grid_n: 19,
            lambda: DEFAULT_LAMBDA,
            selection: Selection::Lambda,
            residual: false,
            residual_steps: 1000,
            ta_hops: 1,
            standalone_ta: false,
            rank_mode: RankMode::Global,
            sandwich_steps: 2000,
            ta_steps: 1000,
            student_steps: 1000,
            importance_batches: 8,
            importance_batch_size: 32,
            fixed_ta_scale: 0.4,
        }
    }
}

impl SchedulePlan {
    pub fn validate(&self) -> Result<()> {
        grid_targets(self.student_scale, 1.0, self.grid_n).map_err(|e| invalid(format!("plan: {e}")))?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid(format!("plan.lambda ({}) must lie in [0, 1]", self.lambda)));
        }
        if self.ta_hops == 0 {
            return Err(invalid("plan.ta_hops must be >= 1"));
        }
        if !(self.fixed_ta_scale > self.student_scale && self.fixed_ta_scale <= 1.0) {
            return Err(invalid(format!(
                "plan.fixed_ta_scale ({}) must lie in (student_scale, 1]",
                self.fixed_ta_scale
            )));
        }
        if self.importance_batches == 0 || self.importance_batch_size == 0 {
            return Err(invalid("plan.importance_batches and plan.importance_batch_size must be >= 1"));
        }
        Ok(())
    }

    /// Optimizer steps MiniDisc is configured to spend (one hop).
    pub fn minidisc_steps(&self) -> usize {
        self.sandwich_steps + self.student_steps
    }

    /// Optimizer steps MaxiDisc is configured to spend.
    pub fn maxidisc_steps(&self) -> usize {
        self.grid_n * (self.ta_steps + self.student_steps)
    }
}

/// Importance batches: a seeded shuffle of the training set cut into
/// `count` batches.
pub fn importance_batches(train_set: &Dataset, plan: &SchedulePlan, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..train_set.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x1a2b_3c4d));
    idx.chunks(plan.importance_batch_size)
        .take(plan.importance_batches)
        .map(<[usize]>::to_vec)
        .collect()
}

/// The single ranking every grid and baseline structure derives from.
pub fn rank_teacher(teacher: &ParamStore<f32>, train_set: &Dataset, plan: &SchedulePlan, seed: u64) -> Result<ImportanceTable> {
    let batches = importance_batches(train_set, plan, seed);
    Ok(rank(&normalize_scores(&importance_scores(teacher, train_set, &batches)?), plan.rank_mode))
}

/// Shared inputs of every scheduling method for one (task, seed) run.
pub struct Context<'a> {
    pub teacher: &'a ParamStore<f32>,
    /// Teacher targets over `train_set`, under the all-ones mask.
    pub cache: &'a TargetCache,
    pub table: &'a ImportanceTable,
    pub train_set: &'a Dataset,
    pub dev: &'a Dataset,
    pub distill: &'a DistillConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopOutcome {
    pub grid: CandidateGrid,
    pub evals: Vec<EvalRecord>,
    pub tradeoffs: Vec<TradeoffRecord>,
    /// Grid index of the chosen assistant.
    pub chosen: usize,
    pub ta_scale: f64,
    pub ta_metric: f64,
    pub sandwich: SandwichReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualOutcome {
    pub pre: f64,
    pub post: f64,
    pub returned: f64,
}

pub struct MinidiscOutcome {
    pub student: ParamStore<f32>,
    pub student_mask: StructureMask,
    pub student_metric: f64,
    /// Metric after assistant distillation, before any residual phase.
    pub ta_distilled_metric: f64,
    pub hops: Vec<HopOutcome>,
    pub residual: Option<ResidualOutcome>,
    pub ledger: TrialLedger,
}

/// Sandwich-trains one grid between the student scale and `upper` (the
/// current teacher's scale) and picks an assistant from it. Returns the
/// shared store the assistant lives in.
fn select_hop(
    ctx: &Context,
    plan: &SchedulePlan,
    teacher: Teacher,
    cache: &TargetCache,
    upper: f64,
    seed: u64,
    ledger: &mut TrialLedger,
) -> Result<(HopOutcome, ParamStore<f32>)> {
    let config = ctx.teacher.config();
    let grid = grid_from_ranking(ctx.table, config, plan.student_scale, upper, plan.grid_n)?;
    let mut shared = teacher.store.clone();
    let cfg = DistillConfig {
        steps: plan.sandwich_steps,
        eta: ctx.distill.eta.min(grid.len()),
        seed,
        ..ctx.distill.clone()
    };
    let sandwich = sandwich_train(&mut shared, &grid, teacher, Some(cache), ctx.train_set, &cfg, ledger)?;
    let evals = evaluate_candidates(&shared, &grid, ctx.dev, ctx.distill.eval_batch)?;
    let tradeoffs = tradeoff_records(&evals, plan.lambda)?;
    // The student-scale entry is the target structure, not an assistant.
    let chosen = 1 + select_optimal(&tradeoffs[1..], plan.selection)?;
    let hop = HopOutcome {
        ta_scale: grid.entries[chosen].target_scale,
        ta_metric: evals[chosen].metric,
        grid,
        evals,
        tradeoffs,
        chosen,
        sandwich,
    };
    Ok((hop, shared))
}

/// One-trial assistant selection followed by assistant-to-student
/// distillation.
pub fn minidisc(ctx: &Context, plan: &SchedulePlan, seed: u64) -> Result<MinidiscOutcome> {
    plan.validate()?;
    let mut ledger = TrialLedger::default();
    let full = StructureMask::full(ctx.teacher.config());
    let mut hops = Vec::new();
    let mut ta_store: Option<ParamStore<f32>> = None;
    let mut ta_mask = full.clone();
    let mut ta_cache: Option<TargetCache> = None;
    let mut upper = 1.0;
    for hop in 0..plan.ta_hops {
        let (teacher, cache) = match (&ta_store, &ta_cache) {
            (Some(s), Some(c)) => (Teacher { store: s, mask: &ta_mask }, c),
            _ => (Teacher { store: ctx.teacher, mask: &full }, ctx.cache),
        };
        let hop_seed = seed.wrapping_add(hop as u64 * 7919);
        let (outcome, mut shared) = select_hop(ctx, plan, teacher, cache, upper, hop_seed, &mut ledger)?;
        let mask = outcome.grid.entries[outcome.chosen].mask.clone();
        if plan.standalone_ta {
            let mut own = teacher.store.clone();
            let cfg = DistillConfig {
                steps: plan.ta_steps,
                seed: hop_seed + 1,
                ..ctx.distill.clone()
            };
            distill(teacher, Some(cache), &mut own, &mask, ctx.train_set, ctx.dev, &cfg, &mut ledger, Phase::TaDistill)?;
            shared = own;
        }
        upper = outcome.ta_scale;
        let next_cache = TargetCache::build(Teacher { store: &shared, mask: &mask }, ctx.train_set, ctx.distill.eval_batch)?;
        hops.push(outcome);
        ta_store = Some(shared);
        ta_mask = mask;
        ta_cache = Some(next_cache);
    }
    let ta_store = ta_store.expect("at least one hop");
    let ta_cache = ta_cache.expect("at least one hop");
    let student_mask = hops.last().expect("hop").grid.entries[0].mask.clone();
    let mut student = ta_store.clone();
    let cfg = DistillConfig {
        steps: plan.student_steps,
        seed: seed.wrapping_add(17),
        ..ctx.distill.clone()
    };
    let out = distill(
        Teacher { store: &ta_store, mask: &ta_mask },
        Some(&ta_cache),
        &mut student,
        &student_mask,
        ctx.train_set,
        ctx.dev,
        &cfg,
        &mut ledger,
        Phase::StudentDistill,
    )?;
    drop(ta_store);
    let ta_distilled_metric = out.best_metric;
    let mut student_metric = ta_distilled_metric;
    let residual = if plan.residual {
        let full_teacher = Teacher { store: ctx.teacher, mask: &full };
        let cfg = DistillConfig {
            steps: plan.residual_steps,
            seed: seed.wrapping_add(29),
            ..ctx.distill.clone()
        };
        let r = residual_distill(&mut student, &student_mask, full_teacher, Some(ctx.cache), ctx, &cfg, &mut ledger)?;
        student_metric = r.returned;
        Some(r)
    } else {
        None
    };
    Ok(MinidiscOutcome {
        student,
        student_mask,
        student_metric,
        ta_distilled_metric,
        hops,
        residual,
        ledger,
    })
}

/// Continues training an assistant-distilled student against the original
/// teacher and keeps whichever checkpoint scores better on dev.
pub fn residual_distill(
    student: &mut ParamStore<f32>,
    mask: &StructureMask,
    teacher: Teacher,
    cache: Option<&TargetCache>,
    ctx: &Context,
    cfg: &DistillConfig,
    ledger: &mut TrialLedger,
) -> Result<ResidualOutcome> {
    let out = train(student, mask, Target::Teacher { teacher, cache }, ctx.train_set, ctx.dev, cfg, true)?;
    ledger.add_steps(Phase::StudentDistill, cfg.steps as u64);
    Ok(ResidualOutcome {
        pre: out.initial_metric,
        post: out.final_metric,
        returned: out.best_metric,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxidiscEntry {
    pub candidate_index: usize,
    pub target_scale: f64,
    pub ta_metric: f64,
    pub student_metric: f64,
}

pub struct MaxidiscOutcome {
    pub grid: CandidateGrid,
    pub entries: Vec<MaxidiscEntry>,
    /// Grid index of the assistant whose student scored best.
    pub best: usize,
    pub best_student: ParamStore<f32>,
    pub best_student_metric: f64,
    pub ledger: TrialLedger,
}

/// Distills every grid entry standalone as an assistant, then a student
/// from each, and keeps the best student. Ties go to the smaller assistant.
pub fn maxidisc(ctx: &Context, plan: &SchedulePlan, seed: u64) -> Result<MaxidiscOutcome> {
    plan.validate()?;
    let config = ctx.teacher.config();
    let grid = grid_from_ranking(ctx.table, config, plan.student_scale, 1.0, plan.grid_n)?;
    let full = StructureMask::full(config);
    let teacher = Teacher { store: ctx.teacher, mask: &full };
    let student_mask = &grid.entries[0].mask;
    let mut ledger = TrialLedger::default();
    let mut entries = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    for (k, entry) in grid.entries.iter().enumerate() {
        let ta_seed = seed.wrapping_add(1000 + 2 * k as u64);
        let mut ta = ctx.teacher.clone();
        let cfg = DistillConfig {
            steps: plan.ta_steps,
            seed: ta_seed,
            ..ctx.distill.clone()
        };
        let ta_out = distill(
            teacher,
            Some(ctx.cache),
            &mut ta,
            &entry.mask,
            ctx.train_set,
            ctx.dev,
            &cfg,
            &mut ledger,
            Phase::MaxidiscEnumeration,
        )?;
        let ta_view = Teacher { store: &ta, mask: &entry.mask };
        let ta_cache = TargetCache::build(ta_view, ctx.train_set, ctx.distill.eval_batch)?;
        let mut student = ta.clone();
        let cfg = DistillConfig {
            steps: plan.student_steps,
            seed: ta_seed + 1,
            ..ctx.distill.clone()
        };
        let s_out = distill(
            ta_view,
            Some(&ta_cache),
            &mut student,
            student_mask,
            ctx.train_set,
            ctx.dev,
            &cfg,
            &mut ledger,
            Phase::StudentDistill,
        )?;
        entries.push(MaxidiscEntry {
            candidate_index: k,
            target_scale: entry.target_scale,
            ta_metric: ta_out.best_metric,
            student_metric: s_out.best_metric,
        });
        if best.as_ref().is_none_or(|b| s_out.best_metric > b.1) {
            best = Some((k, s_out.best_metric, student));
        }
    }
    let (best, best_student_metric, best_student) = best.expect("non-empty grid");
    Ok(MaxidiscOutcome {
        grid,
        entries,
        best,
        best_student,
        best_student_metric,
        ledger,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub metric: f64,
    pub ta_scale: Option<f64>,
    pub ledger: TrialLedger,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    /// Teacher distilled straight into the student structure.
    pub kd: BaselineResult,
    /// Teacher → fixed-scale assistant → student.
    pub fixed_ta: BaselineResult,
    /// Student structure trained on labels only.
    pub finetune: BaselineResult,
}

/// Direct KD, fixed-scale assistant and label-only finetuning, all on the
/// student structure pruned from the teacher.
pub fn baselines(ctx: &Context, plan: &SchedulePlan, seed: u64) -> Result<Baselines> {
    plan.validate()?;
    let config = ctx.teacher.config();
    let full = StructureMask::full(config);
    let teacher = Teacher { store: ctx.teacher, mask: &full };
    let student_mask = structure_at_scale(ctx.table, config, grid_targets(plan.student_scale, 1.0, plan.grid_n)?[0])?;
    let student_cfg = DistillConfig {
        steps: plan.student_steps,
        seed: seed.wrapping_add(31),
        ..ctx.distill.clone()
    };

    let mut kd_ledger = TrialLedger::default();
    let mut student = ctx.teacher.clone();
    let kd = distill(
        teacher,
        Some(ctx.cache),
        &mut student,
        &student_mask,
        ctx.train_set,
        ctx.dev,
        &student_cfg,
        &mut kd_ledger,
        Phase::StudentDistill,
    )?;
    drop(student);

    let mut ta_ledger = TrialLedger::default();
    let ta_mask = structure_at_scale(ctx.table, config, plan.fixed_ta_scale)?;
    let mut ta = ctx.teacher.clone();
    let ta_cfg = DistillConfig {
        steps: plan.ta_steps,
        seed: seed.wrapping_add(37),
        ..ctx.distill.clone()
    };
    distill(teacher, Some(ctx.cache), &mut ta, &ta_mask, ctx.train_set, ctx.dev, &ta_cfg, &mut ta_ledger, Phase::TaDistill)?;
    let ta_view = Teacher { store: &ta, mask: &ta_mask };
    let ta_cache = TargetCache::build(ta_view, ctx.train_set, ctx.distill.eval_batch)?;
    let mut student = ta.clone();
    let fixed = distill(
        ta_view,
        Some(&ta_cache),
        &mut student,
        &student_mask,
        ctx.train_set,
        ctx.dev,
        &student_cfg,
        &mut ta_ledger,
        Phase::StudentDistill,
    )?;
    drop(student);
    drop(ta);

    let mut ft_ledger = TrialLedger::default();
    let mut student = ctx.teacher.clone();
    let ft = train(&mut student, &student_mask, Target::Labels, ctx.train_set, ctx.dev, &student_cfg, true)?;
    ft_ledger.add_steps(Phase::StudentDistill, plan.student_steps as u64);
    ft_ledger.add_trial(Phase::StudentDistill);

    Ok(Baselines {
        kd: BaselineResult {
            metric: kd.best_metric,
            ta_scale: None,
            ledger: kd_ledger,
        },
        fixed_ta: BaselineResult {
            metric: fixed.best_metric,
            ta_scale: Some(plan.fixed_ta_scale),
            ledger: ta_ledger,
        },
        finetune: BaselineResult {
            metric: ft.best_metric,
            ta_scale: None,
            ledger: ft_ledger,
        },
    })
}

/// Plain supervised training of a full-size teacher.
pub fn train_teacher(
    store: &mut ParamStore<f32>,
    train_set: &Dataset,
    dev: &Dataset,
    cfg: &DistillConfig,
) -> Result<f64> {
    let full = StructureMask::full(store.config());
    let out = train(store, &full, Target::Labels, train_set, dev, cfg, true)?;
    Ok(out.best_metric)
}

/// Dev metric of the student structure cut from `store` with no training.
pub fn untrained_student_metric(ctx: &Context, plan: &SchedulePlan) -> Result<f64> {
    let mask = structure_at_scale(ctx.table, ctx.teacher.config(), plan.student_scale)?;
    evaluate(ctx.teacher, &mask, ctx.dev, ctx.distill.eval_batch)
}
