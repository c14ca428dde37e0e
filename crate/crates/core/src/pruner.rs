//! Gradient-based importance of heads and neurons, and the nested candidate
//! structures derived from a single ranking.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::model::{forward, scale_of, ForwardOptions, ModelConfig, ParamStore, StructureKind, StructureMask};
use crate::tensor::Graph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    /// One order per structure type across all layers.
    #[default]
    Global,
    /// Per-layer orders, pruned round-robin across layers.
    Local,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureScore {
    pub layer: usize,
    pub kind: StructureKind,
    pub index: usize,
    pub raw: f64,
    pub normalized: Option<f64>,
    /// Position in the prune order of its type; 0 is pruned first.
    pub rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    /// Ordered by (layer, kind, index).
    pub scores: Vec<StructureScore>,
    pub mode: Option<RankMode>,
}

impl ImportanceTable {
    /// Builds a table from raw per-layer scores of each kind present.
    pub fn from_raw(groups: &[(StructureKind, Vec<Vec<f64>>)]) -> Result<Self> {
        let mut scores = Vec::new();
        let layers = groups.iter().map(|(_, g)| g.len()).max().unwrap_or(0);
        for layer in 0..layers {
            for (kind, per_layer) in groups {
                let Some(vals) = per_layer.get(layer) else { continue };
                for (index, &raw) in vals.iter().enumerate() {
                    if !raw.is_finite() || raw < 0.0 {
                        return Err(invalid(format!("score {raw} of {kind} {layer}/{index} must be finite and >= 0")));
                    }
                    scores.push(StructureScore {
                        layer,
                        kind: *kind,
                        index,
                        raw,
                        normalized: None,
                        rank: None,
                    });
                }
            }
        }
        Ok(Self { scores, mode: None })
    }

    pub fn of_kind(&self, kind: StructureKind) -> impl Iterator<Item = &StructureScore> {
        self.scores.iter().filter(move |s| s.kind == kind)
    }

    /// `(layer, index)` pairs of `kind` in prune order. Empty until ranked.
    pub fn prune_order(&self, kind: StructureKind) -> Vec<(usize, usize)> {
        let mut ranked: Vec<&StructureScore> = self.of_kind(kind).filter(|s| s.rank.is_some()).collect();
        ranked.sort_by_key(|s| s.rank);
        ranked.iter().map(|s| (s.layer, s.index)).collect()
    }
}

/// Mean over batches of `|∂L/∂gate|` for every structure, with the task
/// cross-entropy as `L` and every gate at one. Weights are read only.
pub fn importance_scores(store: &ParamStore<f32>, data: &Dataset, batches: &[Vec<usize>]) -> Result<ImportanceTable> {
    if batches.is_empty() || batches.iter().any(Vec::is_empty) {
        return Err(invalid("importance scoring needs at least one non-empty batch"));
    }
    let config = store.config();
    let mask = StructureMask::full(config);
    let mut sums: Vec<(StructureKind, Vec<Vec<f64>>)> = StructureKind::ALL
        .iter()
        .filter(|&&k| k != StructureKind::CrossHead || config.with_cross_attention)
        .map(|&k| {
            let width = if k == StructureKind::FfnNeuron { config.d_ffn } else { config.heads };
            (k, vec![vec![0.0; width]; config.layers])
        })
        .collect();
    let opts = ForwardOptions {
        relation_heads: None,
        gates: true,
    };
    for idx in batches {
        let batch = data.batch(idx);
        let mut g = Graph::new();
        let params = store.bind(&mut g, false);
        let out = forward(&mut g, store, &params, &mask, &batch, opts)?;
        let loss = g.cross_entropy(out.logits, &batch.labels)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                value: lv as f64,
                step: 0,
                context: "importance scoring".into(),
            });
        }
        g.backward(loss)?;
        for (layer, lg) in out.gates.iter().enumerate() {
            for (kind, acc) in sums.iter_mut() {
                let gate = match kind {
                    StructureKind::SelfHead => &lg.self_heads,
                    StructureKind::CrossHead => &lg.cross_heads,
                    StructureKind::FfnNeuron => &lg.ffn_neurons,
                };
                if let Some((var, covered)) = gate {
                    let grad = g.grad(*var).expect("gate grad");
                    for (&i, v) in covered.iter().zip(grad.data()) {
                        acc[layer][i] += v.abs() as f64;
                    }
                }
            }
        }
    }
    let n = batches.len() as f64;
    for (_, acc) in sums.iter_mut() {
        acc.iter_mut().flatten().for_each(|v| *v /= n);
    }
    ImportanceTable::from_raw(&sums)
}

/// Divides each (layer, kind) group by its ℓ2 norm. All-zero groups stay zero.
pub fn normalize_scores(table: &ImportanceTable) -> ImportanceTable {
    let mut out = table.clone();
    let mut i = 0;
    while i < out.scores.len() {
        let (layer, kind) = (out.scores[i].layer, out.scores[i].kind);
        let end = i + out.scores[i..].iter().take_while(|s| s.layer == layer && s.kind == kind).count();
        let norm = out.scores[i..end].iter().map(|s| s.raw * s.raw).sum::<f64>().sqrt();
        for s in &mut out.scores[i..end] {
            s.normalized = Some(if norm > 0.0 { s.raw / norm } else { 0.0 });
        }
        i = end;
    }
    out
}

fn ascending(a: &StructureScore, b: &StructureScore) -> Ordering {
    let key = |s: &StructureScore| s.normalized.unwrap_or(s.raw);
    key(a)
        .total_cmp(&key(b))
        .then(a.layer.cmp(&b.layer))
        .then(a.index.cmp(&b.index))
}

/// Assigns prune ranks per structure type. Ties go to the lower layer, then
/// the lower index.
pub fn rank(table: &ImportanceTable, mode: RankMode) -> ImportanceTable {
    let mut out = table.clone();
    for kind in StructureKind::ALL {
        let mut members: Vec<usize> = (0..out.scores.len()).filter(|&i| out.scores[i].kind == kind).collect();
        members.sort_by(|&a, &b| ascending(&out.scores[a], &out.scores[b]));
        let order = match mode {
            RankMode::Global => members,
            RankMode::Local => {
                let layers = members.iter().map(|&i| out.scores[i].layer).max().map_or(0, |m| m + 1);
                let mut queues: Vec<std::collections::VecDeque<usize>> = vec![Default::default(); layers];
                for &i in &members {
                    queues[out.scores[i].layer].push_back(i);
                }
                let mut order = Vec::with_capacity(members.len());
                while order.len() < members.len() {
                    for q in queues.iter_mut() {
                        if let Some(i) = q.pop_front() {
                            order.push(i);
                        }
                    }
                }
                order
            }
        };
        for (r, i) in order.into_iter().enumerate() {
            out.scores[i].rank = Some(r);
        }
    }
    out.mode = Some(mode);
    out
}

/// Number of structures kept out of `total` so that the kept fraction is
/// the largest one not above `target`.
pub fn kept_count(total: usize, target: f64) -> usize {
    ((target * total as f64) + 1e-9).floor().min(total as f64) as usize
}

/// Prunes each structure type independently along its prune order until
/// the type's kept fraction first drops to `target` or below.
pub fn structure_at_scale(table: &ImportanceTable, config: &ModelConfig, target: f64) -> Result<StructureMask> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(invalid(format!("target scale {target} outside (0, 1]")));
    }
    let mut mask = StructureMask::full(config);
    for kind in StructureKind::ALL {
        let order = table.prune_order(kind);
        let total = mask.layers.iter().filter_map(|l| l.bits(kind)).map(<[bool]>::len).sum::<usize>();
        if total == 0 {
            continue;
        }
        if order.len() != total {
            return Err(invalid(format!("{kind} ranking covers {} of {total} structures", order.len())));
        }
        let prune = total - kept_count(total, target);
        for &(layer, index) in &order[..prune] {
            mask.layers[layer].bits_mut(kind).expect("kind present")[index] = false;
        }
    }
    if StructureKind::ALL.iter().all(|&k| mask.count_kept(k) == 0) {
        return Err(Error::DegenerateScale { target });
    }
    Ok(mask)
}

/// `s_s + kΔ` for `k = 0..n`, with `Δ = (s_t − s_s)/n`, rounded to 12
/// decimals so that grid values compare equal to their decimal spelling.
pub fn grid_targets(student_scale: f64, teacher_scale: f64, n: usize) -> Result<Vec<f64>> {
    if !(student_scale > 0.0 && student_scale < teacher_scale && teacher_scale <= 1.0) {
        return Err(invalid(format!(
            "need 0 < student scale ({student_scale}) < teacher scale ({teacher_scale}) <= 1"
        )));
    }
    if n < 2 {
        return Err(invalid(format!("grid size {n} must be >= 2")));
    }
    let delta = (teacher_scale - student_scale) / n as f64;
    Ok((0..n).map(|k| round12(student_scale + k as f64 * delta)).collect())
}

pub(crate) fn round12(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub target_scale: f64,
    pub achieved_scale: f64,
    pub mask: StructureMask,
}

/// Nested candidate structures from smallest to largest. The first entry is
/// the student structure; the teacher is not part of the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateGrid {
    pub n: usize,
    pub delta: f64,
    pub student_scale: f64,
    pub teacher_scale: f64,
    pub entries: Vec<GridEntry>,
}

impl CandidateGrid {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn largest(&self) -> &GridEntry {
        self.entries.last().expect("non-empty grid")
    }

    pub fn smallest(&self) -> &GridEntry {
        &self.entries[0]
    }

    /// Every earlier entry is a bitwise subset of every later one.
    pub fn check_nesting(&self) -> Result<()> {
        for i in 0..self.entries.len() {
            for j in i + 1..self.entries.len() {
                if !self.entries[i].mask.is_subset_of(&self.entries[j].mask) {
                    return Err(invalid(format!("grid entry {i} is not nested in entry {j}")));
                }
            }
        }
        Ok(())
    }

    /// Union of the masks; with nesting this is the largest entry.
    pub fn union_mask(&self) -> StructureMask {
        self.entries
            .iter()
            .skip(1)
            .fold(self.entries[0].mask.clone(), |acc, e| acc.union(&e.mask))
    }
}

/// Derives one mask per grid scale from an already ranked table.
pub fn grid_from_ranking(
    table: &ImportanceTable,
    config: &ModelConfig,
    student_scale: f64,
    teacher_scale: f64,
    n: usize,
) -> Result<CandidateGrid> {
    let targets = grid_targets(student_scale, teacher_scale, n)?;
    let entries = targets
        .iter()
        .map(|&t| {
            let mask = structure_at_scale(table, config, t)?;
            Ok(GridEntry {
                target_scale: t,
                achieved_scale: scale_of(config, &mask)?,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let grid = CandidateGrid {
        n,
        delta: (teacher_scale - student_scale) / n as f64,
        student_scale,
        teacher_scale,
        entries,
    };
    grid.check_nesting()?;
    Ok(grid)
}

/// Scores the teacher once, ranks, and derives the whole grid from that
/// single ranking.
pub fn build_grid(
    store: &ParamStore<f32>,
    data: &Dataset,
    batches: &[Vec<usize>],
    student_scale: f64,
    n: usize,
    mode: RankMode,
) -> Result<(CandidateGrid, ImportanceTable)> {
    grid_targets(student_scale, 1.0, n)?;
    let table = rank(&normalize_scores(&importance_scores(store, data, batches)?), mode);
    let grid = grid_from_ranking(&table, store.config(), student_scale, 1.0, n)?;
    Ok((grid, table))
}
