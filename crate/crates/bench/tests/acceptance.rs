//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,5,9` restricts the run to the listed criteria.

#[path = "../../core/tests/common/mod.rs"]
mod common;
#[path = "common/mod.rs"]
mod bench_common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::reference::{max_diff, random_mask, reference_logits, shrink, spread_store};
use common::{repeat_data, spearman};
use minidisc::distiller::{sandwich_train, train, DistillConfig, EvalRecord, Target, Teacher};
use minidisc::ledger::TrialLedger;
use minidisc::model::{
    check_model_gradients, forward, random_batch, ForwardOptions, ModelConfig, ParamStore, StructureKind,
    StructureMask,
};
use minidisc::pruner::{build_grid, grid_targets, importance_scores, RankMode};
use minidisc::scheduler::{
    lambda_tradeoff, nd_tradeoff, select_optimal, tradeoff_records, SchedulePlan, Selection, LAMBDA_SWEEP,
};
use minidisc::tensor::{op_suite, Graph, Tensor};
use minidisc_bench::config::{ExperimentConfig, Method};
use minidisc_bench::report::report_ledger;
use minidisc_bench::run::{run_experiment, run_one, RunResult};
use minidisc_bench::tasks::{make_task, TaskKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn c1_gradients() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for seed in 0..20u64 {
        for (name, report) in op_suite(seed) {
            worst = worst.max(report.max_rel_err);
            if !report.passes(1e-3) {
                failures.push(format!("{name}@{seed}"));
            }
        }
    }
    let mut config = ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        d_ffn: 8,
        vocab: 10,
        max_len: 4,
        n_classes: 3,
        with_cross_attention: false,
    };
    for seed in 0..20u64 {
        config.with_cross_attention = seed % 3 == 2;
        match check_model_gradients(&config, seed, 6) {
            Ok(r) => {
                worst = worst.max(r.max_rel_err);
                if !r.passes(1e-3) {
                    failures.push(format!("model@{seed}"));
                }
            }
            Err(e) => failures.push(format!("model@{seed}: {e}")),
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(120);
    verdict(pass, format!("max rel err {worst:.2e} over ops and model, 20 seeds, {}; failures {failures:?}", secs(elapsed)))
}

fn c2_mask_equivalence() -> Verdict {
    let config = ModelConfig::capacity_gap_teacher();
    let store = spread_store::<f32>(&config, 3, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let mask = random_mask(&config, &mut rng);
        let batch = random_batch(&config, 3, 12, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let out = forward(&mut g, &store, &p, &mask, &batch, ForwardOptions::default()).unwrap();
        let logits = g.value(out.logits).data().to_vec();
        worst = worst.max(max_diff(&logits, &reference_logits(&shrink(&store, &mask), &batch)));
    }
    verdict(worst <= 1e-5, format!("max abs logit diff {worst:.2e} over 10 random masks"))
}

fn pair_data(config: &ModelConfig, seed: u64) -> minidisc::data::Dataset {
    let spec = minidisc_bench::tasks::TaskSpec {
        kind: TaskKind::PairSimilarity,
        vocab: config.vocab,
        length: 16,
        n_classes: 2,
        train_size: 256,
        dev_size: 16,
        seed,
    };
    make_task(&spec).unwrap().train
}

fn c3_nesting() -> Verdict {
    let mut config = ModelConfig::capacity_gap_teacher();
    config.max_len = 16;
    let mut pairs = 0;
    let mut violations = 0;
    for seed in 0..5u64 {
        let store = spread_store::<f32>(&config, seed, 0.02);
        let data = pair_data(&config, seed);
        let batches: Vec<Vec<usize>> = (0..2).map(|b| (b * 32..(b + 1) * 32).collect()).collect();
        for mode in [RankMode::Global, RankMode::Local] {
            let (grid, _) = build_grid(&store, &data, &batches, 0.05, 19, mode).unwrap();
            let mut masks: Vec<&StructureMask> = grid.entries.iter().map(|e| &e.mask).collect();
            let full = StructureMask::full(&config);
            masks.push(&full);
            for i in 0..masks.len() {
                for j in i + 1..masks.len() {
                    pairs += 1;
                    let subset = masks[i].layers.iter().zip(&masks[j].layers).all(|(a, b)| {
                        StructureKind::ALL.iter().all(|&k| match (a.bits(k), b.bits(k)) {
                            (Some(x), Some(y)) => x.iter().zip(y).all(|(p, q)| !p | q),
                            (None, None) => true,
                            _ => false,
                        })
                    });
                    violations += usize::from(!subset);
                }
            }
        }
    }
    verdict(violations == 0, format!("{violations} violations over {pairs} grid pairs, 5 seeds, both rank modes"))
}

fn c4_gridding() -> Verdict {
    let expected: Vec<f64> = (1..=19).map(|k| format!("0.{:02}", 5 * k).parse::<f64>().unwrap()).collect();
    let got = grid_targets(0.05, 1.0, 19).unwrap();
    verdict(got == expected, format!("targets {got:?}"))
}

fn mean_loss(store: &ParamStore<f32>, mask: &StructureMask, data: &minidisc::data::Dataset, batches: &[Vec<usize>]) -> f64 {
    batches
        .iter()
        .map(|idx| {
            let batch = data.batch(idx);
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let out = forward(&mut g, store, &p, mask, &batch, ForwardOptions::default()).unwrap();
            let l = g.cross_entropy(out.logits, &batch.labels).unwrap();
            g.value(l).item() as f64
        })
        .sum::<f64>()
        / batches.len() as f64
}

fn c5_importance() -> Verdict {
    let start = Instant::now();
    let cfg = ModelConfig {
        layers: 2,
        heads: 4,
        d_model: 32,
        d_ffn: 64,
        vocab: 16,
        max_len: 8,
        n_classes: 2,
        with_cross_attention: false,
    };
    let mut positive = 0;
    let mut rhos = Vec::new();
    for seed in 0..20u64 {
        let train_set = repeat_data(512, 100 + seed);
        let dev = repeat_data(128, 200 + seed);
        let mut store = ParamStore::<f32>::init(&cfg, seed).unwrap();
        let tcfg = DistillConfig {
            steps: 300,
            lr: 3e-3,
            batch_size: 32,
            eval_every: 1000,
            seed,
            ..DistillConfig::default()
        };
        let full = StructureMask::full(&cfg);
        train(&mut store, &full, Target::Labels, &train_set, &dev, &tcfg, false).unwrap();
        let batches: Vec<Vec<usize>> = (0..4).map(|b| (b * 32..(b + 1) * 32).collect()).collect();
        let table = importance_scores(&store, &train_set, &batches).unwrap();
        let scores: Vec<f64> = table.of_kind(StructureKind::SelfHead).map(|s| s.raw).collect();
        let base = mean_loss(&store, &full, &train_set, &batches);
        let increases: Vec<f64> = table
            .of_kind(StructureKind::SelfHead)
            .map(|s| {
                let mut m = full.clone();
                m.layers[s.layer].self_heads[s.index] = false;
                mean_loss(&store, &m, &train_set, &batches) - base
            })
            .collect();
        let rho = spearman(&scores, &increases);
        rhos.push(rho);
        positive += usize::from(rho > 0.0);
    }
    let elapsed = start.elapsed();
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    verdict(
        positive >= 18 && elapsed < Duration::from_secs(180),
        format!("positive in {positive}/20 seeds (mean rho {mean:.2}), {}", secs(elapsed)),
    )
}

fn c6_tradeoffs() -> Verdict {
    let mut problems = Vec::new();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    if !close(lambda_tradeoff(0.8, 0.5, 0.2).unwrap(), 0.9) {
        problems.push("t_lambda(0.8, 0.5, 0.2) != 0.9".to_string());
    }
    if lambda_tradeoff(0.7, 1.0, 0.5).unwrap() != 0.7 || lambda_tradeoff(0.7, 0.5, 0.0).unwrap() != 0.7 {
        problems.push("t_lambda boundary".into());
    }
    let nd = nd_tradeoff(&[0.80, 0.82, 0.83], &[0.1, 0.15, 0.2]).unwrap();
    let ok = nd.len() == 3
        && nd[2].is_none()
        && nd[0].is_some_and(|v| (v + 0.4).abs() < 1e-9)
        && nd[1].is_some_and(|v| (v + 0.2).abs() < 1e-9);
    if !ok {
        problems.push(format!("nd example gave {nd:?}"));
    }
    if nd_tradeoff(&[0.5; 3], &[0.2, 0.4, 0.6]).unwrap() != vec![Some(-0.0), Some(-0.0), None] {
        problems.push("nd of a flat curve".into());
    }
    let scales = grid_targets(0.05, 1.0, 19).unwrap();
    let metrics: Vec<f64> = scales.iter().map(|s| 1.0 - 0.9 * (1.0 - s) * (1.0 - s)).collect();
    let evals: Vec<_> = scales
        .iter()
        .zip(&metrics)
        .enumerate()
        .map(|(i, (&s, &m))| EvalRecord {
            candidate_index: i,
            target_scale: s,
            achieved_scale: s,
            metric: m,
        })
        .collect();
    let mut drifts = Vec::new();
    for lambda in LAMBDA_SWEEP {
        let recs = tradeoff_records(&evals, lambda).unwrap();
        let best = recs.iter().map(|r| r.t_lambda).fold(f64::MIN, f64::max);
        let argmaxes = recs.iter().filter(|r| (r.t_lambda - best).abs() < 1e-12).count();
        if argmaxes != 1 {
            problems.push(format!("lambda {lambda}: {argmaxes} maximisers"));
        }
        let picked = scales[select_optimal(&recs, Selection::Lambda).unwrap()];
        let drift = ((picked - (1.0 - lambda / 1.8)) / 0.05).abs();
        drifts.push(drift);
        if drift > 1.0 + 1e-9 {
            problems.push(format!("lambda {lambda}: drift {drift:.2} steps"));
        }
    }
    let max_drift = drifts.iter().cloned().fold(0.0, f64::max);
    verdict(problems.is_empty(), format!("hand examples exact, unique argmax, max drift {max_drift:.2} steps; problems {problems:?}"))
}

fn c7_memory() -> Verdict {
    let mut config = ModelConfig::capacity_gap_teacher();
    config.max_len = 16;
    let teacher = spread_store::<f32>(&config, 1, 0.02);
    let data = pair_data(&config, 1);
    let full = StructureMask::full(&config);
    let batches = vec![(0..32).collect::<Vec<_>>()];
    let one_store = teacher.bytes();
    let mut lines = Vec::new();
    let mut pass = true;
    let mut optimizer = Vec::new();
    for n in [2, 5, 19] {
        let (grid, _) = build_grid(&teacher, &data, &batches, 0.05, n, RankMode::Global).unwrap();
        let mut shared = teacher.clone();
        let cfg = DistillConfig {
            steps: 2,
            eta: 2,
            ..DistillConfig::default()
        };
        let report =
            sandwich_train(&mut shared, &grid, Teacher { store: &teacher, mask: &full }, None, &data, &cfg, &mut TrialLedger::default())
                .unwrap();
        pass &= report.peak_param_bytes == 2 * one_store;
        optimizer.push(report.optimizer_bytes);
        lines.push(format!("n={n}: {} B", report.peak_param_bytes));
    }
    pass &= optimizer.iter().all(|&b| b == optimizer[0]);
    verdict(pass, format!("peak parameter bytes {} (one store = {one_store} B), optimizer {optimizer:?} B", lines.join(", ")))
}

/// The capacity-gap suite, sized to the CPU budget: sequences of 16 tokens,
/// 2000 training examples and reduced step counts. Teachers are trained
/// fresh so that each run's time includes its teacher.
fn capacity_gap_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::capacity_gap(out);
    cfg.model.max_len = 16;
    for t in &mut cfg.tasks {
        t.length = 16;
        t.train_size = 2000;
        t.dev_size = 500;
    }
    cfg.teacher.steps = 600;
    cfg.plan.sandwich_steps = 150;
    cfg.plan.ta_steps = 100;
    cfg.plan.student_steps = 100;
    cfg.distill.eval_every = 50;
    cfg.methods = vec![Method::Minidisc, Method::Maxidisc, Method::Kd];
    cfg
}

struct Suite {
    runs: Vec<(RunResult, Duration)>,
    failures: Vec<String>,
    grid_n: usize,
}

fn run_suite() -> Suite {
    let dir = tempfile::tempdir().unwrap();
    let cfg = capacity_gap_config(dir.path());
    cfg.validate().unwrap();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for spec in &cfg.tasks {
        for &seed in &cfg.seeds {
            let start = Instant::now();
            match run_one(&cfg, spec, seed) {
                Ok(r) => {
                    let d = start.elapsed();
                    eprintln!(
                        "  {} seed {seed}: teacher {:.3}, {} in {}",
                        spec.kind.name(),
                        r.teacher_metric,
                        r.rows.iter().map(|x| format!("{} {:.3}", x.method, x.metric)).collect::<Vec<_>>().join(", "),
                        secs(d)
                    );
                    runs.push((r, d));
                }
                Err(e) => failures.push(format!("{} seed {seed}: {e:#}", spec.kind.name())),
            }
        }
    }
    Suite {
        runs,
        failures,
        grid_n: cfg.plan.grid_n,
    }
}

fn c8_ledger(suite: &Suite) -> Verdict {
    let plan = SchedulePlan::default();
    let ratio = plan.maxidisc_steps() as f64 / plan.minidisc_steps() as f64;
    let ledgers: Vec<(Method, TrialLedger)> = suite.runs.iter().flat_map(|(r, _)| r.ledgers.clone()).collect();
    let mini_ok = ledgers.iter().filter(|(m, _)| *m == Method::Minidisc).all(|(_, l)| l.ta_selection_trials() == 1);
    let maxi_ok = ledgers
        .iter()
        .filter(|(m, _)| *m == Method::Maxidisc)
        .all(|(_, l)| l.ta_selection_trials() == suite.grid_n as u64);
    let report = report_ledger(&ledgers);
    let measured: BTreeMap<String, String> = report
        .iter()
        .map(|r| (r.method.clone(), r.step_ratio_vs_kd.map_or("-".into(), |v| format!("{v:.1}x"))))
        .collect();
    let have_runs = !suite.runs.is_empty();
    verdict(
        have_runs && mini_ok && maxi_ok && ratio >= 5.0,
        format!(
            "TA-selection trials: minidisc 1 in every run {mini_ok}, maxidisc {} in every run {maxi_ok}; default step ratio maxidisc/minidisc {ratio:.2}; measured vs kd {measured:?}",
            suite.grid_n
        ),
    )
}

fn c9_end_to_end(suite: &Suite) -> (Verdict, Verdict) {
    let slow: Vec<String> = suite
        .runs
        .iter()
        .filter(|(_, d)| *d >= Duration::from_secs(600))
        .map(|(r, d)| format!("{} seed {} {}", r.task.kind.name(), r.seed, secs(*d)))
        .collect();
    let complete = suite.failures.is_empty() && suite.runs.len() == 9 && slow.is_empty();
    let metric = |r: &RunResult, m: Method| r.rows.iter().find(|x| x.method == m.name()).map(|x| x.metric);

    let mut per_task: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (r, _) in &suite.runs {
        let e = per_task.entry(r.task.kind.name()).or_default();
        e.0.extend(metric(r, Method::Minidisc));
        e.1.extend(metric(r, Method::Kd));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let mut wins = 0;
    let mut lines = Vec::new();
    for (task, (mini, kd)) in &per_task {
        let (a, b) = (mean(mini), mean(kd));
        wins += usize::from(a >= b);
        lines.push(format!("{task} minidisc {a:.3} vs kd {b:.3}"));
    }
    let a = verdict(
        complete && wins >= 2,
        format!("{wins}/3 tasks with minidisc >= kd ({}); failures {:?}; slow runs {slow:?}", lines.join("; "), suite.failures),
    );

    let mut within = 0;
    let mut picks = Vec::new();
    for (r, _) in &suite.runs {
        let (Some(mini), Some(maxi)) = (&r.minidisc, &r.maxidisc) else { continue };
        let d = mini.chosen.abs_diff(maxi.best);
        within += usize::from(d <= 1);
        picks.push(format!("{}/{}", mini.chosen, maxi.best));
    }
    let total = suite.runs.len().max(1);
    let frac = within as f64 / total as f64;
    let b = verdict(
        complete && frac >= 0.6,
        format!("{within}/{total} runs within one grid step (minidisc/maxidisc index: {})", picks.join(" ")),
    );
    (a, b)
}

fn c10_residual() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = bench_common::tiny_config(dir.path(), 40);
    cfg.plan.residual = true;
    cfg.plan.residual_steps = 40;
    cfg.methods = vec![Method::Minidisc];
    cfg.seeds = (0..4).collect();
    let results = run_experiment(&cfg).unwrap();
    let mut ok = 0;
    let mut improved = 0;
    for r in &results.runs {
        let m = r.minidisc.as_ref().unwrap();
        let pre = m.pre_residual.unwrap();
        ok += usize::from(m.student_metric >= pre);
        improved += usize::from(m.student_metric > pre);
    }
    let n = results.runs.len();
    verdict(
        results.failures.is_empty() && n == 12 && ok == n,
        format!("returned >= pre-residual in {ok}/{n} runs ({improved} strictly better)"),
    )
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv" || x == "svg") {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c11_reproducibility() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let config = ModelConfig::capacity_gap_teacher();
    let store = spread_store::<f32>(&config, 11, 0.05);
    let path = dir.path().join("model.ckpt");
    store.save(&path).unwrap();
    let back = ParamStore::<f32>::load(&path).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let exact = back.config() == store.config()
        && store.tensors().iter().zip(back.tensors()).all(|(a, b)| a.shape() == b.shape() && bits(a) == bits(b));
    let again = dir.path().join("again.ckpt");
    back.save(&again).unwrap();
    let same_bytes = fs::read(&path).unwrap() == fs::read(&again).unwrap();

    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&bench_common::tiny_config(a.path(), 5)).unwrap();
    run_experiment(&bench_common::tiny_config(b.path(), 5)).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let svgs = ta.iter().filter(|f| f.0.ends_with(".svg")).count();
    let identical = !ta.is_empty() && ta == tb;
    verdict(
        exact && same_bytes && identical && svgs > 0,
        format!("checkpoint bit-exact {exact}, re-save identical {same_bytes}; {} CSV/SVG files ({svgs} SVG) identical across two runs {identical}", ta.len()),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |c: u32| only.as_ref().is_none_or(|o| o.contains(&c));
    let names = [
        (1, "gradient suite"),
        (2, "mask equivalence"),
        (3, "nesting"),
        (4, "gridding"),
        (5, "importance sanity"),
        (6, "tradeoff formulas"),
        (7, "shared-store memory"),
        (8, "efficiency ledger"),
        (9, "directional end-to-end"),
        (10, "residual no-harm"),
        (11, "reproducibility"),
    ];
    let mut all_pass = true;
    let mut suite: Option<Suite> = None;
    let mut report = |id: &str, name: &str, v: Verdict, took: Duration| {
        all_pass &= v.pass;
        println!("criterion {id:<3} {} {name}: {} [{}]", if v.pass { "PASS" } else { "FAIL" }, v.detail, secs(took));
    };
    for (id, name) in names {
        if !want(id) {
            continue;
        }
        let start = Instant::now();
        match id {
            1 => report("1", name, c1_gradients(), start.elapsed()),
            2 => report("2", name, c2_mask_equivalence(), start.elapsed()),
            3 => report("3", name, c3_nesting(), start.elapsed()),
            4 => report("4", name, c4_gridding(), start.elapsed()),
            5 => report("5", name, c5_importance(), start.elapsed()),
            6 => report("6", name, c6_tradeoffs(), start.elapsed()),
            7 => report("7", name, c7_memory(), start.elapsed()),
            8 | 9 => {
                let s = suite.get_or_insert_with(run_suite);
                if id == 8 {
                    report("8", name, c8_ledger(s), start.elapsed());
                } else {
                    let (a, b) = c9_end_to_end(s);
                    report("9a", name, a, start.elapsed());
                    report("9b", name, b, start.elapsed());
                }
            }
            10 => report("10", name, c10_residual(), start.elapsed()),
            11 => report("11", name, c11_reproducibility(), start.elapsed()),
            _ => unreachable!(),
        }
    }
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
