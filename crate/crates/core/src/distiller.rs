//! Distillation objectives, masked training, and parameter-shared sandwich
//! optimization over a candidate grid.

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EpochSampler};
use crate::error::{invalid, shape_err, Error, Result};
use crate::ledger::{Phase, TrialLedger};
use crate::model::{
    forward, param_bytes_live, param_bytes_peak, reset_param_peak, visibility, Batch, ForwardOptions, ModelOutputs,
    ParamStore, StructureMask, Visibility,
};
use crate::pruner::CandidateGrid;
use crate::tensor::{Graph, Tensor, Var};

pub const KL_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Soft-target cross-entropy on logits plus hidden-state MSE.
    #[default]
    Tsd,
    /// KL between query, key and value relation matrices.
    Tad,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub objective: Objective,
    pub relation_heads: usize,
    /// Candidates sampled per sandwich step.
    pub eta: usize,
    pub steps: usize,
    pub lr: f64,
    pub warmup: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Dev evaluation interval in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub eval_batch: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Tsd,
            relation_heads: 32,
            eta: 6,
            steps: 1000,
            lr: 1e-3,
            warmup: 0.1,
            weight_decay: 0.01,
            batch_size: 32,
            seed: 0,
            eval_every: 100,
            eval_batch: 256,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.eta == 0 {
            return Err(invalid("distill.eta must be >= 1"));
        }
        if self.objective == Objective::Tad && (self.relation_heads == 0 || !d_model.is_multiple_of(self.relation_heads)) {
            return Err(invalid(format!(
                "distill.relation_heads ({}) must divide d_model ({d_model})",
                self.relation_heads
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("distill.lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup) {
            return Err(invalid("distill.warmup must lie in [0, 1]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("distill.weight_decay must be >= 0"));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(invalid("distill.batch_size and distill.eval_batch must be >= 1"));
        }
        Ok(())
    }

    pub fn with_steps(&self, steps: usize) -> Self {
        Self { steps, ..self.clone() }
    }

    fn relation_heads(&self) -> Option<usize> {
        (self.objective == Objective::Tad).then_some(self.relation_heads)
    }
}

/// A frozen model viewed through a mask.
#[derive(Clone, Copy, Debug)]
pub struct Teacher<'a> {
    pub store: &'a ParamStore<f32>,
    pub mask: &'a StructureMask,
}

/// Detached teacher targets for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutputs {
    /// `(batch, n_classes)` softmax of the teacher logits.
    pub probs: Tensor<f32>,
    /// `(valid tokens, d_model)` final hidden states of non-padding tokens.
    pub hidden: Tensor<f32>,
    /// Query, key and value relations, `(heads, batch, len, len)` each.
    pub relations: Option<[Tensor<f32>; 3]>,
}

/// Flat `(batch·len)` row indices of the non-padding tokens.
pub fn valid_rows(batch: &Batch) -> Vec<usize> {
    batch
        .lengths
        .iter()
        .enumerate()
        .flat_map(|(b, &n)| (0..n).map(move |t| b * batch.seq_len + t))
        .collect()
}

fn softmax_rows(x: &[f32], cols: usize) -> Vec<f32> {
    x.chunks(cols)
        .flat_map(|r| {
            let m = r.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f32> = r.iter().map(|v| (v - m).exp()).collect();
            let z: f32 = e.iter().sum();
            e.into_iter().map(move |v| v / z)
        })
        .collect()
}

fn gather_rows(data: &[f32], width: usize, rows: &[usize]) -> Vec<f32> {
    rows.iter().flat_map(|&r| data[r * width..(r + 1) * width].iter().copied()).collect()
}

impl TeacherOutputs {
    /// Copies the targets out of a teacher forward.
    pub fn detach(g: &Graph<f32>, out: &ModelOutputs, batch: &Batch) -> Result<Self> {
        let logits = g.value(out.logits);
        let c = logits.shape()[1];
        let probs = Tensor::new(logits.shape().to_vec(), softmax_rows(logits.data(), c))?;
        let h = g.value(out.hidden);
        let d = h.shape()[2];
        let rows = valid_rows(batch);
        let hidden = Tensor::new(vec![rows.len(), d], gather_rows(h.data(), d, &rows))?;
        let relations = out.relations.map(|r| [r.q, r.k, r.v].map(|v| g.value(v).clone()));
        Ok(Self {
            probs,
            hidden,
            relations,
        })
    }

    /// Runs the teacher on `batch` without recording gradients.
    pub fn compute(teacher: Teacher, batch: &Batch, relation_heads: Option<usize>) -> Result<Self> {
        let mut g = Graph::new();
        let p = teacher.store.bind(&mut g, false);
        let opts = ForwardOptions {
            relation_heads,
            gates: false,
        };
        let out = forward(&mut g, teacher.store, &p, teacher.mask, batch, opts)?;
        Self::detach(&g, &out, batch)
    }
}

/// Per-example teacher soft targets and hidden states, computed once. The
/// teacher is frozen, so these equal what a per-step teacher forward would
/// produce for any batch containing the example.
#[derive(Clone, Debug)]
pub struct TargetCache {
    probs: Vec<Vec<f32>>,
    hidden: Vec<Vec<f32>>,
    n_classes: usize,
    d_model: usize,
}

impl TargetCache {
    pub fn build(teacher: Teacher, data: &Dataset, batch_size: usize) -> Result<Self> {
        let cfg = teacher.store.config();
        let mut probs = Vec::with_capacity(data.len());
        let mut hidden = Vec::with_capacity(data.len());
        for idx in data.chunks(batch_size) {
            let batch = data.batch(&idx);
            let t = TeacherOutputs::compute(teacher, &batch, None)?;
            let d = cfg.d_model;
            let mut row = 0;
            for (b, &n) in batch.lengths.iter().enumerate() {
                probs.push(t.probs.data()[b * cfg.n_classes..(b + 1) * cfg.n_classes].to_vec());
                hidden.push(t.hidden.data()[row * d..(row + n) * d].to_vec());
                row += n;
            }
        }
        Ok(Self {
            probs,
            hidden,
            n_classes: cfg.n_classes,
            d_model: cfg.d_model,
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn targets(&self, indices: &[usize]) -> Result<TeacherOutputs> {
        let probs: Vec<f32> = indices.iter().flat_map(|&i| self.probs[i].iter().copied()).collect();
        let hidden: Vec<f32> = indices.iter().flat_map(|&i| self.hidden[i].iter().copied()).collect();
        let rows = hidden.len() / self.d_model;
        Ok(TeacherOutputs {
            probs: Tensor::new(vec![indices.len(), self.n_classes], probs)?,
            hidden: Tensor::new(vec![rows, self.d_model], hidden)?,
            relations: None,
        })
    }
}

/// Soft-target cross-entropy plus MSE over the hidden states of
/// non-padding tokens. Teacher tensors are constants.
pub fn tsd_loss(g: &mut Graph<f32>, student: &ModelOutputs, teacher: &TeacherOutputs, batch: &Batch) -> Result<Var> {
    let ce = g.soft_cross_entropy(student.logits, &teacher.probs)?;
    let shape = g.shape(student.hidden).to_vec();
    let d = shape[2];
    if teacher.hidden.shape().get(1) != Some(&d) {
        return Err(shape_err("tsd_loss", format!("teacher hidden {:?} vs student {shape:?}", teacher.hidden.shape())));
    }
    let flat = g.reshape(student.hidden, &[shape[0] * shape[1], d])?;
    let rows = valid_rows(batch);
    let h = if rows.len() == shape[0] * shape[1] { flat } else { g.gather(flat, 0, &rows)? };
    let target = g.constant(teacher.hidden.clone());
    let mse = g.mse(h, target)?;
    g.add(ce, mse)
}

/// Σ over Q, K and V of KL(teacher ‖ student) relations, each averaged over
/// relation heads and the non-padding query rows of the batch.
pub fn tad_loss(g: &mut Graph<f32>, student: &ModelOutputs, teacher: &TeacherOutputs, batch: &Batch) -> Result<Var> {
    let (s, t) = match (&student.relations, &teacher.relations) {
        (Some(s), Some(t)) => (s, t),
        _ => return Err(invalid("tad_loss needs relations on both teacher and student outputs")),
    };
    let l = batch.seq_len;
    let heads = s.heads;
    let valid: usize = batch.lengths.iter().sum();
    let w = 1.0 / (heads * valid) as f32;
    let mut weights = Vec::with_capacity(heads * batch.size() * l);
    for _ in 0..heads {
        for &n in &batch.lengths {
            weights.extend((0..l).map(|i| if i < n { w } else { 0.0 }));
        }
    }
    let mut total: Option<Var> = None;
    for (q, p) in [s.q, s.k, s.v].into_iter().zip(t) {
        let kl = g.kl_div(p, q, Some(&weights), KL_EPS)?;
        total = Some(match total {
            None => kl,
            Some(acc) => g.add(acc, kl)?,
        });
    }
    Ok(total.expect("three terms"))
}

/// AdamW whose updates and decay touch only elements a mask can see.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
    weight_decay: f32,
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

impl AdamW {
    pub fn new(store: &ParamStore<f32>, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f32>> = store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            weight_decay: weight_decay as f32,
        }
    }

    /// Bytes of optimizer state.
    pub fn state_bytes(&self) -> usize {
        self.m.iter().chain(&self.v).map(|v| v.len() * 4).sum()
    }

    /// One update. Matrices are decayed; vectors (biases, norms) are not.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>], vis: &[Visibility], lr: f64) {
        self.t += 1;
        let lr = lr as f32;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, grad) in grads.iter().enumerate() {
            if matches!(vis[i], Visibility::Nothing) {
                continue;
            }
            let Some(grad) = grad else { continue };
            let decay = if store.tensor(i).shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = store.tensor_mut(i).data_mut();
            for (e, &gr) in grad.data().iter().enumerate() {
                if !vis[i].is_visible(e) {
                    continue;
                }
                m[e] = BETA1 * m[e] + (1.0 - BETA1) * gr;
                v[e] = BETA2 * v[e] + (1.0 - BETA2) * gr * gr;
                let update = (m[e] / bc1) / ((v[e] / bc2).sqrt() + ADAM_EPS);
                w[e] -= lr * (update + decay * w[e]);
            }
        }
    }
}

/// Linear warmup over the first `warmup` fraction of steps, then linear
/// decay to zero.
pub fn lr_at(cfg: &DistillConfig, step: usize) -> f64 {
    let total = cfg.steps.max(1) as f64;
    let warm = (cfg.warmup * total).round().max(0.0);
    let s = step as f64;
    if s < warm {
        cfg.lr * (s + 1.0) / warm
    } else {
        cfg.lr * ((total - s) / (total - warm).max(1.0)).clamp(0.0, 1.0)
    }
}

/// Dev accuracy of `store` under `mask`.
pub fn evaluate(store: &ParamStore<f32>, mask: &StructureMask, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0usize;
    for idx in data.chunks(batch_size) {
        let batch = data.batch(&idx);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let out = forward(&mut g, store, &p, mask, &batch, ForwardOptions::default())?;
        let logits = g.value(out.logits);
        let c = logits.shape()[1];
        for (row, &label) in logits.data().chunks(c).zip(&batch.labels) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            correct += usize::from(pred == label);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// What a training run fits.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    /// Ground-truth labels with cross-entropy.
    Labels,
    /// A frozen teacher under the configured objective. With a cache, TSD
    /// targets are looked up instead of recomputed.
    Teacher {
        teacher: Teacher<'a>,
        cache: Option<&'a TargetCache>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub initial_metric: f64,
    pub best_metric: f64,
    pub final_metric: f64,
    /// `(step, dev metric)` at every evaluation, starting with step 0.
    pub trajectory: Vec<(usize, f64)>,
    pub losses: Vec<f64>,
}

fn loss_for(
    g: &mut Graph<f32>,
    out: &ModelOutputs,
    target: Target,
    targets: Option<&TeacherOutputs>,
    batch: &Batch,
    cfg: &DistillConfig,
) -> Result<Var> {
    match target {
        Target::Labels => g.cross_entropy(out.logits, &batch.labels),
        Target::Teacher { .. } => {
            let t = targets.expect("teacher targets");
            match cfg.objective {
                Objective::Tsd => tsd_loss(g, out, t, batch),
                Objective::Tad => tad_loss(g, out, t, batch),
            }
        }
    }
}

fn batch_targets(target: Target, idx: &[usize], batch: &Batch, cfg: &DistillConfig) -> Result<Option<TeacherOutputs>> {
    match target {
        Target::Labels => Ok(None),
        Target::Teacher { teacher, cache } => match (cfg.objective, cache) {
            (Objective::Tsd, Some(c)) => c.targets(idx).map(Some),
            _ => TeacherOutputs::compute(teacher, batch, cfg.relation_heads()).map(Some),
        },
    }
}

fn non_finite(value: f64, step: usize, context: String) -> Error {
    Error::NonFinite { value, step, context }
}

/// Trains the parameters `mask` can see. When `keep_best` is set, the best
/// dev checkpoint is restored into `store` at the end.
pub fn train(
    store: &mut ParamStore<f32>,
    mask: &StructureMask,
    target: Target,
    train_set: &Dataset,
    dev: &Dataset,
    cfg: &DistillConfig,
    keep_best: bool,
) -> Result<TrainOutcome> {
    cfg.validate(store.config().d_model)?;
    if train_set.is_empty() {
        return Err(invalid("empty training set"));
    }
    let vis = visibility(store.config(), store.layout(), mask)?;
    let mut opt = AdamW::new(store, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = EpochSampler::new(train_set.len());
    let opts = ForwardOptions {
        relation_heads: match target {
            Target::Labels => None,
            Target::Teacher { .. } => cfg.relation_heads(),
        },
        gates: false,
    };

    let initial = evaluate(store, mask, dev, cfg.eval_batch)?;
    let mut trajectory = vec![(0, initial)];
    let mut best = (initial, keep_best.then(|| store.tensors().to_vec()));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch_size, &mut rng);
        let batch = train_set.batch(&idx);
        let targets = batch_targets(target, &idx, &batch, cfg)?;
        let mut g = Graph::new();
        let params = store.bind(&mut g, true);
        let out = forward(&mut g, store, &params, mask, &batch, opts)?;
        let loss = loss_for(&mut g, &out, target, targets.as_ref(), &batch, cfg)?;
        let lv = g.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(non_finite(lv, step, format!("training loss at lr {:.3e}", lr_at(cfg, step))));
        }
        losses.push(lv);
        g.backward(loss)?;
        let grads: Vec<Option<Tensor<f32>>> = params.iter().map(|&v| g.grad(v)).collect();
        drop(g);
        opt.step(store, &grads, &vis, lr_at(cfg, step));

        let done = step + 1;
        if done == cfg.steps || (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
            let m = evaluate(store, mask, dev, cfg.eval_batch)?;
            trajectory.push((done, m));
            if m > best.0 {
                best = (m, keep_best.then(|| store.tensors().to_vec()));
            }
        }
    }
    let final_metric = trajectory.last().map_or(initial, |t| t.1);
    if keep_best && best.0 > final_metric {
        if let Some(tensors) = best.1 {
            for (i, t) in tensors.into_iter().enumerate() {
                *store.tensor_mut(i) = t;
            }
        }
    }
    Ok(TrainOutcome {
        initial_metric: initial,
        best_metric: if keep_best { best.0 } else { final_metric },
        final_metric,
        trajectory,
        losses,
    })
}

/// Distills `teacher` into the `mask` view of `student` and returns the
/// best dev metric, leaving that checkpoint in `student`. The ledger is
/// credited with the steps and one trial under `phase`.
#[allow(clippy::too_many_arguments)]
pub fn distill(
    teacher: Teacher,
    cache: Option<&TargetCache>,
    student: &mut ParamStore<f32>,
    mask: &StructureMask,
    train_set: &Dataset,
    dev: &Dataset,
    cfg: &DistillConfig,
    ledger: &mut TrialLedger,
    phase: Phase,
) -> Result<TrainOutcome> {
    if std::ptr::eq(teacher.store, student) {
        return Err(invalid("teacher and student must be separate stores"));
    }
    let out = train(student, mask, Target::Teacher { teacher, cache }, train_set, dev, cfg, true)?;
    ledger.add_steps(phase, cfg.steps as u64);
    ledger.add_trial(phase);
    Ok(out)
}

/// Candidate indices for one sandwich step: largest and smallest entry, plus
/// `eta − 2` distinct intermediate entries.
pub fn sample_candidates<R: rand::Rng>(n: usize, eta: usize, rng: &mut R) -> Result<Vec<usize>> {
    if eta == 0 || eta > n {
        return Err(invalid(format!("eta ({eta}) must lie in 1..={n}")));
    }
    let mut picked = vec![n - 1];
    if eta >= 2 {
        picked.push(0);
    }
    if eta > 2 {
        let inner = sample(rng, n - 2, eta - 2);
        let mut inner: Vec<usize> = inner.into_iter().map(|i| i + 1).collect();
        inner.sort_unstable();
        picked.extend(inner);
    }
    Ok(picked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub losses: Vec<f64>,
    /// Candidate indices trained at each step.
    pub sampled: Vec<Vec<usize>>,
    /// High-water mark of live parameter-store bytes during training.
    pub peak_param_bytes: usize,
    pub optimizer_bytes: usize,
}

/// Sum of per-candidate losses on one batch, all through one shared set of
/// parameter leaves.
pub fn sandwich_loss(
    g: &mut Graph<f32>,
    shared: &ParamStore<f32>,
    params: &[Var],
    grid: &CandidateGrid,
    candidates: &[usize],
    batch: &Batch,
    targets: &TeacherOutputs,
    cfg: &DistillConfig,
) -> Result<Var> {
    let opts = ForwardOptions {
        relation_heads: cfg.relation_heads(),
        gates: false,
    };
    let mut total: Option<Var> = None;
    for &c in candidates {
        let out = forward(g, shared, params, &grid.entries[c].mask, batch, opts)?;
        let l = match cfg.objective {
            Objective::Tsd => tsd_loss(g, &out, targets, batch)?,
            Objective::Tad => tad_loss(g, &out, targets, batch)?,
        };
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    total.ok_or_else(|| invalid("no candidates"))
}

/// Jointly trains sampled grid candidates on the one shared store. The
/// teacher is a frozen snapshot; every step does one optimizer update.
#[allow(clippy::too_many_arguments)]
pub fn sandwich_train(
    shared: &mut ParamStore<f32>,
    grid: &CandidateGrid,
    teacher: Teacher,
    cache: Option<&TargetCache>,
    train_set: &Dataset,
    cfg: &DistillConfig,
    ledger: &mut TrialLedger,
) -> Result<SandwichReport> {
    cfg.validate(shared.config().d_model)?;
    if grid.is_empty() {
        return Err(invalid("empty candidate grid"));
    }
    if cfg.eta > grid.len() {
        return Err(invalid(format!("eta ({}) exceeds grid size ({})", cfg.eta, grid.len())));
    }
    if train_set.is_empty() {
        return Err(invalid("empty training set"));
    }
    reset_param_peak();
    let vis = visibility(shared.config(), shared.layout(), &grid.union_mask())?;
    let mut opt = AdamW::new(shared, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = EpochSampler::new(train_set.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut sampled = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch_size, &mut rng);
        let batch = train_set.batch(&idx);
        let targets = batch_targets(Target::Teacher { teacher, cache }, &idx, &batch, cfg)?.expect("teacher");
        let candidates = sample_candidates(grid.len(), cfg.eta, &mut rng)?;
        let mut g = Graph::new();
        let params = shared.bind(&mut g, true);
        let loss = sandwich_loss(&mut g, shared, &params, grid, &candidates, &batch, &targets, cfg)?;
        let lv = g.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(non_finite(lv, step, format!("sandwich loss over candidates {candidates:?}")));
        }
        losses.push(lv);
        sampled.push(candidates);
        g.backward(loss)?;
        let grads: Vec<Option<Tensor<f32>>> = params.iter().map(|&v| g.grad(v)).collect();
        drop(g);
        opt.step(shared, &grads, &vis, lr_at(cfg, step));
    }
    ledger.add_steps(Phase::Sandwich, cfg.steps as u64);
    ledger.add_trial(Phase::Sandwich);
    Ok(SandwichReport {
        losses,
        sampled,
        peak_param_bytes: param_bytes_peak().max(param_bytes_live()),
        optimizer_bytes: opt.state_bytes(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub candidate_index: usize,
    pub target_scale: f64,
    pub achieved_scale: f64,
    pub metric: f64,
}

/// Dev metric of every grid entry through the shared store.
pub fn evaluate_candidates(
    shared: &ParamStore<f32>,
    grid: &CandidateGrid,
    dev: &Dataset,
    batch_size: usize,
) -> Result<Vec<EvalRecord>> {
    if dev.is_empty() {
        return Err(invalid("empty dev set"));
    }
    grid.entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            Ok(EvalRecord {
                candidate_index: i,
                target_scale: e.target_scale,
                achieved_scale: e.achieved_scale,
                metric: evaluate(shared, &e.mask, dev, batch_size)?,
            })
        })
        .collect()
}

/// Writes records as CSV with a header row.
pub fn write_eval_csv<W: Write>(records: &[EvalRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(|e| invalid(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}
