//! CSV and JSON outputs, and the step/trial ledger report.

use std::fs;
use std::path::Path;

use anyhow::{Context as _, Result};
use minidisc::distiller::write_eval_csv;
use minidisc::scheduler::{Phase, TrialLedger};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::run::{ExperimentResults, RunResult};

pub const RESULTS_CSV: &str = "results.csv";
pub const LEDGER_CSV: &str = "ledger.csv";
pub const LEDGER_REPORT_CSV: &str = "ledger_report.csv";
pub const FAILURES_CSV: &str = "failures.csv";
pub const CANDIDATES_CSV: &str = "candidates.csv";
pub const TRADEOFFS_CSV: &str = "tradeoffs.csv";
pub const TRADEOFFS_JSON: &str = "tradeoffs.json";
pub const STRUCTURES_CSV: &str = "structures.csv";
pub const MAXIDISC_CSV: &str = "maxidisc.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: String,
    pub seed: u64,
    pub method: String,
    pub ta_scale: Option<f64>,
    pub student_scale: f64,
    pub metric: f64,
    pub t_lambda: Option<f64>,
    pub t_nd: Option<f64>,
    pub steps: u64,
    pub trials: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub task: String,
    pub seed: u64,
    pub method: String,
    pub phase: String,
    pub steps: u64,
    pub trials: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureRow {
    pub layer: usize,
    pub heads: usize,
    pub neurons: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub method: String,
    pub runs: usize,
    pub steps: u64,
    pub trials: u64,
    pub ta_selection_trials: u64,
    /// Steps relative to the KD baseline over the same runs.
    pub step_ratio_vs_kd: Option<f64>,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(!rows.is_empty()).from_path(path).with_context(|| format!("writing {}", path.display()))?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize().map(|row| row.with_context(|| format!("parsing {}", path.display()))).collect()
}

pub fn ledger_rows(task: &str, seed: u64, method: Method, ledger: &TrialLedger) -> Vec<LedgerRow> {
    Phase::ALL
        .iter()
        .map(|&p| {
            let c = ledger.phase(p);
            LedgerRow {
                task: task.to_string(),
                seed,
                method: method.name().to_string(),
                phase: p.to_string(),
                steps: c.steps,
                trials: c.trials,
            }
        })
        .collect()
}

/// Rebuilds per-(task, seed, method) ledgers from `ledger.csv` rows.
pub fn ledgers_from_rows(rows: &[LedgerRow]) -> Result<Vec<(Method, TrialLedger)>> {
    let mut out: Vec<((String, u64, Method), TrialLedger)> = Vec::new();
    for r in rows {
        let method: Method = r.method.parse()?;
        let phase = Phase::ALL
            .into_iter()
            .find(|p| p.to_string() == r.phase)
            .with_context(|| format!("unknown ledger phase `{}`", r.phase))?;
        let key = (r.task.clone(), r.seed, method);
        let idx = match out.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                out.push((key, TrialLedger::default()));
                out.len() - 1
            }
        };
        let l = &mut out[idx].1;
        l.add_steps(phase, r.steps);
        for _ in 0..r.trials {
            l.add_trial(phase);
        }
    }
    Ok(out.into_iter().map(|((_, _, m), l)| (m, l)).collect())
}

/// Per method: total steps and trials over all runs, and the step ratio
/// against KD.
pub fn report_ledger(ledgers: &[(Method, TrialLedger)]) -> Vec<LedgerSummary> {
    let mut methods: Vec<Method> = ledgers.iter().map(|(m, _)| *m).collect();
    methods.sort();
    methods.dedup();
    let total = |m: Method| {
        let mut acc = TrialLedger::default();
        let mut runs = 0;
        for (_, l) in ledgers.iter().filter(|(k, _)| *k == m) {
            acc.merge(l);
            runs += 1;
        }
        (acc, runs)
    };
    let kd_steps = methods.contains(&Method::Kd).then(|| total(Method::Kd).0.total_steps());
    methods
        .into_iter()
        .map(|m| {
            let (l, runs) = total(m);
            LedgerSummary {
                method: m.name().to_string(),
                runs,
                steps: l.total_steps(),
                trials: l.total_trials(),
                ta_selection_trials: l.ta_selection_trials(),
                step_ratio_vs_kd: kd_steps.filter(|&k| k > 0).map(|k| l.total_steps() as f64 / k as f64),
            }
        })
        .collect()
}

pub fn format_ledger_table(rows: &[LedgerSummary]) -> String {
    let mut s = format!("{:<10} {:>5} {:>12} {:>8} {:>10} {:>8}\n", "method", "runs", "steps", "trials", "ta-select", "vs kd");
    for r in rows {
        let ratio = r.step_ratio_vs_kd.map_or("-".to_string(), |v| format!("{v:.2}x"));
        s.push_str(&format!(
            "{:<10} {:>5} {:>12} {:>8} {:>10} {:>8}\n",
            r.method, r.runs, r.steps, r.trials, r.ta_selection_trials, ratio
        ));
    }
    s
}

/// Per-run artifacts: candidate evaluations, tradeoffs, the chosen
/// assistant's structure and the MaxiDisc enumeration.
pub fn write_run_artifacts(dir: &Path, run: &RunResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    if let Some(m) = &run.minidisc {
        write_eval_csv(&m.evals, fs::File::create(dir.join(CANDIDATES_CSV))?)?;
        write_csv(&dir.join(TRADEOFFS_CSV), &m.tradeoffs, &[])?;
        fs::write(dir.join(TRADEOFFS_JSON), serde_json::to_string_pretty(&m.tradeoffs)?)?;
        let rows: Vec<StructureRow> = m
            .structure
            .iter()
            .enumerate()
            .map(|(layer, &(heads, neurons))| StructureRow { layer, heads, neurons })
            .collect();
        write_csv(&dir.join(STRUCTURES_CSV), &rows, &["layer", "heads", "neurons"])?;
    }
    if let Some(m) = &run.maxidisc {
        write_csv(&dir.join(MAXIDISC_CSV), &m.entries, &[])?;
    }
    Ok(())
}

/// Experiment-level tables. Only the calling thread writes these.
pub fn write_experiment(out: &Path, results: &ExperimentResults) -> Result<()> {
    let rows: Vec<&ResultRow> = results.runs.iter().flat_map(|r| &r.rows).collect();
    write_csv(
        &out.join(RESULTS_CSV),
        &rows,
        &["task", "seed", "method", "ta_scale", "student_scale", "metric", "t_lambda", "t_nd", "steps", "trials"],
    )?;
    let ledger: Vec<LedgerRow> = results
        .runs
        .iter()
        .flat_map(|r| r.ledgers.iter().flat_map(move |(m, l)| ledger_rows(r.task.kind.name(), r.seed, *m, l)))
        .collect();
    write_csv(&out.join(LEDGER_CSV), &ledger, &["task", "seed", "method", "phase", "steps", "trials"])?;
    let all: Vec<(Method, TrialLedger)> = results.runs.iter().flat_map(|r| r.ledgers.iter().cloned()).collect();
    write_csv(
        &out.join(LEDGER_REPORT_CSV),
        &report_ledger(&all),
        &["method", "runs", "steps", "trials", "ta_selection_trials", "step_ratio_vs_kd"],
    )?;
    write_csv(&out.join(FAILURES_CSV), &results.failures, &["task", "seed", "error"])?;
    Ok(())
}
