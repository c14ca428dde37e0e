use super::store::{AttnIds, Layout};
use super::{ModelConfig, StructureKind, StructureMask};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    /// Surviving per-head and per-neuron weight slices.
    pub trm_params: usize,
    /// Token and position embeddings. Never pruned.
    pub emb_params: usize,
}

/// Parameters owned by one structure of `kind`: for a head its query, key
/// and value columns (with biases) plus its output-projection rows; for a
/// neuron its input column, bias and output row.
pub fn structure_params(config: &ModelConfig, kind: StructureKind) -> usize {
    let d = config.d_model;
    match kind {
        StructureKind::SelfHead | StructureKind::CrossHead => {
            let dh = config.head_dim();
            3 * (d * dh + dh) + dh * d
        }
        StructureKind::FfnNeuron => 2 * d + 1,
    }
}

pub fn param_count(config: &ModelConfig, mask: &StructureMask) -> Result<ParamCount> {
    mask.check(config)?;
    let trm_params = StructureKind::ALL
        .iter()
        .map(|&k| mask.count_kept(k) * structure_params(config, k))
        .sum();
    Ok(ParamCount {
        trm_params,
        emb_params: (config.vocab + config.max_len) * config.d_model,
    })
}

/// Fraction of transformer parameters that survive under `mask`.
pub fn scale_of(config: &ModelConfig, mask: &StructureMask) -> Result<f64> {
    let full = param_count(config, &StructureMask::full(config))?.trm_params;
    let kept = param_count(config, mask)?.trm_params;
    Ok(kept as f64 / full as f64)
}

/// Which elements of a tensor a masked model actually reads.
#[derive(Clone, Debug, PartialEq)]
pub enum Visibility {
    All,
    Nothing,
    Elements(Vec<bool>),
}

impl Visibility {
    pub fn is_visible(&self, i: usize) -> bool {
        match self {
            Visibility::All => true,
            Visibility::Nothing => false,
            Visibility::Elements(e) => e[i],
        }
    }
}

fn cols(rows: usize, width: usize, col_on: impl Fn(usize) -> bool) -> Visibility {
    Visibility::Elements((0..rows * width).map(|i| col_on(i % width)).collect())
}

fn rows(n_rows: usize, width: usize, row_on: impl Fn(usize) -> bool) -> Visibility {
    Visibility::Elements((0..n_rows * width).map(|i| row_on(i / width)).collect())
}

fn attn_visibility(out: &mut [Visibility], ids: &AttnIds, bits: &[bool], d: usize, dh: usize) {
    if bits.iter().all(|b| !b) {
        for i in [ids.ln_g, ids.ln_b, ids.q_w, ids.q_b, ids.k_w, ids.k_b, ids.v_w, ids.v_b, ids.o_w, ids.o_b] {
            out[i] = Visibility::Nothing;
        }
        return;
    }
    let head = |c: usize| bits[c / dh];
    for (w, b) in [(ids.q_w, ids.q_b), (ids.k_w, ids.k_b), (ids.v_w, ids.v_b)] {
        out[w] = cols(d, d, head);
        out[b] = cols(1, d, head);
    }
    out[ids.o_w] = rows(d, d, head);
}

/// Per-tensor visibility under `mask`, in layout order. Blocks that are
/// skipped are invisible as a whole, including their layer norm and output
/// bias.
pub fn visibility(config: &ModelConfig, layout: &Layout, mask: &StructureMask) -> Result<Vec<Visibility>> {
    mask.check(config)?;
    let d = config.d_model;
    let dh = config.head_dim();
    let dff = config.d_ffn;
    let mut out = vec![Visibility::All; layout.len()];
    for (ids, lm) in layout.layers.iter().zip(&mask.layers) {
        attn_visibility(&mut out, &ids.attn, &lm.self_heads, d, dh);
        if let (Some(c), Some(bits)) = (&ids.cross, &lm.cross_heads) {
            attn_visibility(&mut out, c, bits, d, dh);
        }
        if lm.skip_ffn() {
            for i in [ids.ffn_ln_g, ids.ffn_ln_b, ids.w1, ids.b1, ids.w2, ids.b2] {
                out[i] = Visibility::Nothing;
            }
        } else {
            let n = &lm.ffn_neurons;
            out[ids.w1] = cols(d, dff, |j| n[j]);
            out[ids.b1] = cols(1, dff, |j| n[j]);
            out[ids.w2] = rows(dff, d, |j| n[j]);
        }
    }
    for v in &mut out {
        if let Visibility::Elements(e) = v {
            if e.iter().all(|b| *b) {
                *v = Visibility::All;
            }
        }
    }
    Ok(out)
}
