//! Running an experiment: one worker per (task, seed) run.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Context as _, Result};
use log::{info, warn};
use minidisc::distiller::{EvalRecord, Teacher, TargetCache};
use minidisc::model::{ParamStore, StructureMask};
use minidisc::pruner::{grid_from_ranking, ImportanceTable};
use minidisc::scheduler::{
    baselines, maxidisc, minidisc, rank_teacher, train_teacher, Context, MaxidiscEntry, TradeoffRecord, TrialLedger,
};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};
use crate::report::{self, ResultRow};
use crate::tasks::{make_task, TaskData, TaskSpec};

pub const THREADS_ENV: &str = "MINIDISC_THREADS";

/// Dataset spec of one run: the task's own seed mixed with the run seed.
pub fn run_task_spec(spec: &TaskSpec, seed: u64) -> TaskSpec {
    TaskSpec {
        seed: spec.seed.wrapping_add(seed.wrapping_mul(1_000_003)),
        ..spec.clone()
    }
}

pub fn run_dir(out_dir: &Path, spec: &TaskSpec, seed: u64) -> PathBuf {
    out_dir.join(spec.kind.name()).join(format!("seed-{seed}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinidiscSummary {
    pub chosen: usize,
    pub ta_scale: f64,
    pub student_metric: f64,
    /// Before residual distillation, when it ran.
    pub pre_residual: Option<f64>,
    pub evals: Vec<EvalRecord>,
    pub tradeoffs: Vec<TradeoffRecord>,
    /// Surviving (heads, neurons) per layer of the chosen assistant.
    pub structure: Vec<(usize, usize)>,
    pub peak_param_bytes: usize,
    pub optimizer_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxidiscSummary {
    pub best: usize,
    pub best_student_metric: f64,
    pub entries: Vec<MaxidiscEntry>,
}

/// Everything one (task, seed) run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub task: TaskSpec,
    pub seed: u64,
    pub teacher_metric: f64,
    pub student_scale: f64,
    pub rows: Vec<ResultRow>,
    pub ledgers: Vec<(Method, TrialLedger)>,
    pub minidisc: Option<MinidiscSummary>,
    pub maxidisc: Option<MaxidiscSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub task: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct ExperimentResults {
    pub runs: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct TeacherMeta {
    model: minidisc::model::ModelConfig,
    task: TaskSpec,
    distill: minidisc::distiller::DistillConfig,
    metric: f64,
}

/// Loads the run's teacher checkpoint when it was trained under the same
/// settings, else trains and saves one.
pub fn load_or_train_teacher(cfg: &ExperimentConfig, data: &TaskData, seed: u64, dir: &Path) -> Result<(ParamStore<f32>, f64)> {
    let tcfg = cfg.teacher_distill_config(seed);
    let ckpt = dir.join("teacher.ckpt");
    let meta_path = dir.join("teacher.json");
    if let (Ok(text), true) = (fs::read_to_string(&meta_path), ckpt.exists()) {
        if let Ok(meta) = serde_json::from_str::<TeacherMeta>(&text) {
            if meta.model == cfg.model && meta.task == data.spec && meta.distill == tcfg {
                info!("reusing teacher {}", ckpt.display());
                return Ok((ParamStore::load(&ckpt)?, meta.metric));
            }
        }
    }
    let mut store = ParamStore::init(&cfg.model, seed)?;
    let metric = train_teacher(&mut store, &data.train, &data.dev, &tcfg)?;
    fs::create_dir_all(dir)?;
    store.save(&ckpt)?;
    let meta = TeacherMeta {
        model: cfg.model.clone(),
        task: data.spec.clone(),
        distill: tcfg,
        metric,
    };
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
    Ok((store, metric))
}

/// Teacher, importance ranking and cached targets for one run.
pub struct Prepared {
    pub data: TaskData,
    pub teacher: ParamStore<f32>,
    pub teacher_metric: f64,
    pub table: ImportanceTable,
    pub cache: TargetCache,
}

pub fn prepare(cfg: &ExperimentConfig, spec: &TaskSpec, seed: u64) -> Result<Prepared> {
    let data = make_task(&run_task_spec(spec, seed))?;
    let dir = run_dir(&cfg.out_dir, spec, seed);
    let (teacher, teacher_metric) = load_or_train_teacher(cfg, &data, seed, &dir)?;
    let table = rank_teacher(&teacher, &data.train, &cfg.plan, seed)?;
    let full = StructureMask::full(&cfg.model);
    let cache = TargetCache::build(Teacher { store: &teacher, mask: &full }, &data.train, cfg.distill.eval_batch)?;
    Ok(Prepared {
        data,
        teacher,
        teacher_metric,
        table,
        cache,
    })
}

/// Runs the configured methods for one (task, seed) and writes the run's
/// own artifacts under its run directory.
pub fn run_one(cfg: &ExperimentConfig, spec: &TaskSpec, seed: u64) -> Result<RunResult> {
    let p = prepare(cfg, spec, seed)?;
    let dir = run_dir(&cfg.out_dir, spec, seed);
    let ctx = Context {
        teacher: &p.teacher,
        cache: &p.cache,
        table: &p.table,
        train_set: &p.data.train,
        dev: &p.data.dev,
        distill: &cfg.distill,
    };
    let plan = &cfg.plan;
    let row = |method: Method, ta_scale: Option<f64>, metric: f64, ledger: &TrialLedger| ResultRow {
        task: spec.kind.name().to_string(),
        seed,
        method: method.name().to_string(),
        ta_scale,
        student_scale: plan.student_scale,
        metric,
        t_lambda: None,
        t_nd: None,
        steps: ledger.total_steps(),
        trials: ledger.total_trials(),
    };
    let mut result = RunResult {
        task: spec.clone(),
        seed,
        teacher_metric: p.teacher_metric,
        student_scale: plan.student_scale,
        rows: Vec::new(),
        ledgers: Vec::new(),
        minidisc: None,
        maxidisc: None,
    };
    let has = |m: Method| cfg.methods.contains(&m);

    if has(Method::Minidisc) {
        let out = minidisc(&ctx, plan, seed)?;
        let hop = &out.hops[0];
        let chosen = &hop.tradeoffs[hop.chosen];
        let mut r = row(Method::Minidisc, Some(hop.ta_scale), out.student_metric, &out.ledger);
        r.t_lambda = Some(chosen.t_lambda);
        r.t_nd = chosen.t_nd;
        result.rows.push(r);
        result.ledgers.push((Method::Minidisc, out.ledger.clone()));
        result.minidisc = Some(MinidiscSummary {
            chosen: hop.chosen,
            ta_scale: hop.ta_scale,
            student_metric: out.student_metric,
            pre_residual: out.residual.as_ref().map(|r| r.pre),
            evals: hop.evals.clone(),
            tradeoffs: hop.tradeoffs.clone(),
            structure: hop.grid.entries[hop.chosen].mask.per_layer_counts(),
            peak_param_bytes: hop.sandwich.peak_param_bytes,
            optimizer_bytes: hop.sandwich.optimizer_bytes,
        });
    }
    if has(Method::Maxidisc) {
        let out = maxidisc(&ctx, plan, seed)?;
        let best = &out.entries[out.best];
        result.rows.push(row(Method::Maxidisc, Some(best.target_scale), out.best_student_metric, &out.ledger));
        result.ledgers.push((Method::Maxidisc, out.ledger.clone()));
        result.maxidisc = Some(MaxidiscSummary {
            best: out.best,
            best_student_metric: out.best_student_metric,
            entries: out.entries,
        });
    }
    if Method::BASELINES.iter().any(|&m| has(m)) {
        let b = baselines(&ctx, plan, seed)?;
        for (m, r) in [(Method::Kd, &b.kd), (Method::FixedTa, &b.fixed_ta), (Method::Finetune, &b.finetune)] {
            if has(m) {
                result.rows.push(row(m, r.ta_scale, r.metric, &r.ledger));
                result.ledgers.push((m, r.ledger.clone()));
            }
        }
    }
    report::write_run_artifacts(&dir, &result)?;
    Ok(result)
}

/// Worker count: `MINIDISC_THREADS` when set, else the machine's
/// parallelism, never more than the number of runs.
pub fn worker_count(runs: usize) -> usize {
    let env = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0);
    let n = env.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    n.clamp(1, runs.max(1))
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Runs every (task, seed) pair. A failing run is recorded and the rest
/// continue. Results come back in (task, seed) config order.
pub fn run_all(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    cfg.validate()?;
    let jobs: Vec<(&TaskSpec, u64)> = cfg.tasks.iter().flat_map(|t| cfg.seeds.iter().map(move |&s| (t, s))).collect();
    let slots: Mutex<Vec<Option<std::result::Result<RunResult, String>>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let workers = worker_count(jobs.len());
    info!("{} runs on {workers} worker(s)", jobs.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(spec, seed)) = jobs.get(i) else { break };
                info!("run {} seed {seed}: start", spec.kind.name());
                let out = match catch_unwind(AssertUnwindSafe(|| run_one(cfg, spec, seed))) {
                    Ok(Ok(r)) => Ok(r),
                    Ok(Err(e)) => Err(format!("{e:#}")),
                    Err(p) => Err(panic_message(p)),
                };
                if let Err(e) = &out {
                    warn!("run {} seed {seed} failed: {e}", spec.kind.name());
                }
                slots.lock().expect("results lock")[i] = Some(out);
            });
        }
    });
    let mut results = ExperimentResults::default();
    for ((spec, seed), slot) in jobs.iter().zip(slots.into_inner().expect("results lock")) {
        match slot.ok_or_else(|| anyhow!("run {} seed {seed} never finished", spec.kind.name()))? {
            Ok(r) => results.runs.push(r),
            Err(error) => results.failures.push(RunFailure {
                task: spec.kind.name().to_string(),
                seed: *seed,
                error,
            }),
        }
    }
    Ok(results)
}

/// Runs the experiment and writes results, ledgers and plots under
/// `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    fs::write(cfg.out_dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let results = run_all(cfg)?;
    report::write_experiment(&cfg.out_dir, &results)?;
    crate::plot::plot_dir(&cfg.out_dir)?;
    Ok(results)
}

/// Grid of the run's teacher without any training past the teacher:
/// per-entry scales and surviving structures.
pub fn grid_only(cfg: &ExperimentConfig, spec: &TaskSpec, seed: u64) -> Result<minidisc::pruner::CandidateGrid> {
    let p = prepare(cfg, spec, seed)?;
    Ok(grid_from_ranking(&p.table, &cfg.model, cfg.plan.student_scale, 1.0, cfg.plan.grid_n)?)
}
