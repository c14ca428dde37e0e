use std::collections::HashMap;

use super::mask::kept;
use super::store::AttnIds;
use super::{ParamStore, StructureMask, LN_EPS, PAD_BIAS};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// A padded batch of token sequences, row-major `(batch, seq_len)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub seq_len: usize,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Emit relation matrices with this many relation heads.
    pub relation_heads: Option<usize>,
    /// Put a differentiable all-ones gate on every surviving structure.
    pub gates: bool,
}

/// Gate leaves of one layer, each with the structure indices it covers.
#[derive(Clone, Debug, Default)]
pub struct LayerGates {
    pub self_heads: Option<(Var, Vec<usize>)>,
    pub cross_heads: Option<(Var, Vec<usize>)>,
    pub ffn_neurons: Option<(Var, Vec<usize>)>,
}

/// Query, key and value relation distributions, each shaped
/// `(relation_heads, batch, len, len)`.
#[derive(Clone, Copy, Debug)]
pub struct Relations {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct ModelOutputs {
    /// `(batch, n_classes)`
    pub logits: Var,
    /// `(batch, len, d_model)`, after the final layer norm.
    pub hidden: Var,
    pub relations: Option<Relations>,
    /// Empty unless gates were requested.
    pub gates: Vec<LayerGates>,
}

/// Additive key-padding bias of shape `(groups·batch, len, len)`. Group-major
/// order puts the group index outermost.
fn pad_bias<T: Real>(lengths: &[usize], len: usize, groups: usize, group_major: bool) -> Tensor<T> {
    let b = lengths.len();
    let neg = T::from_f64_lossy(PAD_BIAS);
    let mut data = vec![T::zero(); groups * b * len * len];
    for gi in 0..groups {
        for (bi, &n) in lengths.iter().enumerate() {
            let slab = if group_major { gi * b + bi } else { bi * groups + gi };
            for i in 0..len {
                for j in n..len {
                    data[(slab * len + i) * len + j] = neg;
                }
            }
        }
    }
    Tensor::new(vec![groups * b, len, len], data).expect("pad shape")
}

struct Ctx<'a, T: Real> {
    p: &'a [Var],
    b: usize,
    l: usize,
    dh: usize,
    lengths: &'a [usize],
    pads: HashMap<usize, Var>,
    gates: bool,
    _t: std::marker::PhantomData<T>,
}

impl<T: Real> Ctx<'_, T> {
    fn pad(&mut self, g: &mut Graph<T>, heads: usize) -> Var {
        let (lengths, l) = (self.lengths, self.l);
        *self
            .pads
            .entry(heads)
            .or_insert_with(|| g.constant(pad_bias(lengths, l, heads, false)))
    }

    fn gate(&self, g: &mut Graph<T>, n: usize) -> Option<Var> {
        self.gates.then(|| g.param(Tensor::full(&[n], T::one())))
    }

    /// Projects `(b·l, d)` rows into `(b·heads, l, dh)`.
    fn split_heads(&self, g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
        let x = g.reshape(x, &[self.b, self.l, heads, self.dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[self.b * heads, self.l, self.dh])
    }

    fn linear_cols(&self, g: &mut Graph<T>, x: Var, w: usize, bias: usize, cols: Option<&[usize]>) -> Result<Var> {
        let (w, bias) = match cols {
            None => (self.p[w], self.p[bias]),
            Some(c) => (g.gather(self.p[w], 1, c)?, g.gather(self.p[bias], 0, c)?),
        };
        let y = g.matmul(x, w)?;
        g.add_bias(y, bias)
    }

    /// Multi-head attention restricted to the surviving heads of `bits`.
    /// Returns `None` when the block is skipped.
    fn attention(
        &mut self,
        g: &mut Graph<T>,
        ids: &AttnIds,
        x: Var,
        memory: Option<Var>,
        bits: &[bool],
    ) -> Result<Option<(Var, Option<(Var, Vec<usize>)>)>> {
        let heads = kept(bits);
        if heads.is_empty() {
            return Ok(None);
        }
        let hk = heads.len();
        let cols: Option<Vec<usize>> = (hk != bits.len())
            .then(|| heads.iter().flat_map(|&h| h * self.dh..(h + 1) * self.dh).collect());
        let xn = g.layer_norm(x, self.p[ids.ln_g], self.p[ids.ln_b], LN_EPS)?;
        let kv_in = memory.unwrap_or(xn);
        let q = self.linear_cols(g, xn, ids.q_w, ids.q_b, cols.as_deref())?;
        let k = self.linear_cols(g, kv_in, ids.k_w, ids.k_b, cols.as_deref())?;
        let v = self.linear_cols(g, kv_in, ids.v_w, ids.v_b, cols.as_deref())?;
        let q = self.split_heads(g, q, hk)?;
        let k = self.split_heads(g, k, hk)?;
        let v = self.split_heads(g, v, hk)?;
        let scores = g.matmul_bt(q, k)?;
        let scores = g.scale(scores, T::from_f64_lossy(1.0 / (self.dh as f64).sqrt()));
        let pad = self.pad(g, hk);
        let scores = g.add(scores, pad)?;
        let probs = g.softmax(scores)?;
        let ctx = g.matmul(probs, v)?;
        let mut ctx = g.reshape(ctx, &[self.b, hk, self.l, self.dh])?;
        let gate = self.gate(g, hk);
        if let Some(gv) = gate {
            ctx = g.mul_along(ctx, gv, 1)?;
        }
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[self.b * self.l, hk * self.dh])?;
        let wo = match &cols {
            None => self.p[ids.o_w],
            Some(c) => g.gather(self.p[ids.o_w], 0, c)?,
        };
        let out = g.matmul(ctx, wo)?;
        let out = g.add_bias(out, self.p[ids.o_b])?;
        Ok(Some((out, gate.map(|v| (v, heads)))))
    }
}

/// Runs the encoder under `mask`. `params` must come from
/// [`ParamStore::bind`] on the same graph.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &[Var],
    mask: &StructureMask,
    batch: &Batch,
    opts: ForwardOptions,
) -> Result<ModelOutputs> {
    let cfg = store.config();
    let layout = store.layout();
    mask.check(cfg)?;
    if params.len() != layout.len() {
        return Err(invalid(format!("{} bound params for a layout of {}", params.len(), layout.len())));
    }
    let (b, l, d) = (batch.size(), batch.seq_len, cfg.d_model);
    if b == 0 {
        return Err(invalid("empty batch"));
    }
    if l == 0 || l > cfg.max_len {
        return Err(invalid(format!("sequence length {l} outside 1..={}", cfg.max_len)));
    }
    if batch.ids.len() != b * l {
        return Err(shape_err("forward", format!("{} ids for batch {b} x len {l}", batch.ids.len())));
    }
    if let Some(bad) = batch.lengths.iter().find(|&&n| n == 0 || n > l) {
        return Err(invalid(format!("sequence length entry {bad} outside 1..={l}")));
    }
    if let Some(bad) = batch.ids.iter().find(|&&t| t >= cfg.vocab) {
        return Err(invalid(format!("token id {bad} >= vocab {}", cfg.vocab)));
    }
    if let Some(rh) = opts.relation_heads {
        if rh == 0 || d % rh != 0 {
            return Err(invalid(format!("relation heads {rh} must divide d_model {d}")));
        }
    }

    let mut ctx = Ctx::<T> {
        p: params,
        b,
        l,
        dh: cfg.head_dim(),
        lengths: &batch.lengths,
        pads: HashMap::new(),
        gates: opts.gates,
        _t: std::marker::PhantomData,
    };

    let tok = g.embedding(params[layout.tok_emb], &batch.ids)?;
    let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
    let pos = g.embedding(params[layout.pos_emb], &pos_ids)?;
    let mut x = g.add(tok, pos)?;
    let memory = x;

    let mut gates = Vec::new();
    for (ids, lm) in layout.layers.iter().zip(&mask.layers) {
        let mut lg = LayerGates::default();
        if let Some((out, gate)) = ctx.attention(g, &ids.attn, x, None, &lm.self_heads)? {
            x = g.add(x, out)?;
            lg.self_heads = gate;
        }
        if let (Some(cids), Some(bits)) = (&ids.cross, &lm.cross_heads) {
            if let Some((out, gate)) = ctx.attention(g, cids, x, Some(memory), bits)? {
                x = g.add(x, out)?;
                lg.cross_heads = gate;
            }
        }
        let neurons = kept(&lm.ffn_neurons);
        if !neurons.is_empty() {
            let cols = (neurons.len() != lm.ffn_neurons.len()).then_some(neurons.as_slice());
            let xn = g.layer_norm(x, params[ids.ffn_ln_g], params[ids.ffn_ln_b], LN_EPS)?;
            let h = ctx.linear_cols(g, xn, ids.w1, ids.b1, cols)?;
            let mut h = g.gelu(h);
            let gate = ctx.gate(g, neurons.len());
            if let Some(gv) = gate {
                h = g.mul_along(h, gv, 1)?;
            }
            let w2 = match cols {
                None => params[ids.w2],
                Some(c) => g.gather(params[ids.w2], 0, c)?,
            };
            let out = g.matmul(h, w2)?;
            let out = g.add_bias(out, params[ids.b2])?;
            x = g.add(x, out)?;
            lg.ffn_neurons = gate.map(|v| (v, neurons));
        }
        gates.push(lg);
    }

    let h2 = g.layer_norm(x, params[layout.final_ln_g], params[layout.final_ln_b], LN_EPS)?;
    let mut pool = vec![T::zero(); b * b * l];
    for (bi, &n) in batch.lengths.iter().enumerate() {
        let w = T::one() / T::from_usize(n).unwrap();
        for t in 0..n {
            pool[bi * b * l + bi * l + t] = w;
        }
    }
    let pool = g.constant(Tensor::new(vec![b, b * l], pool)?);
    let pooled = g.matmul(pool, h2)?;
    let logits = g.matmul(pooled, params[layout.cls_w])?;
    let logits = g.add_bias(logits, params[layout.cls_b])?;

    let relations = match opts.relation_heads {
        None => None,
        Some(rh) => {
            let dr = d / rh;
            let rel = layout.relation;
            let pad = g.constant(pad_bias(&batch.lengths, l, rh, true));
            let mut out = [None; 3];
            for (slot, (w, bias)) in [(rel.q_w, rel.q_b), (rel.k_w, rel.k_b), (rel.v_w, rel.v_b)].into_iter().enumerate() {
                let a = ctx.linear_cols(g, h2, w, bias, None)?;
                let a = g.reshape(a, &[b, l, rh, dr])?;
                let a = g.permute(a, &[2, 0, 1, 3])?;
                let a = g.reshape(a, &[rh * b, l, dr])?;
                let s = g.matmul_bt(a, a)?;
                let s = g.scale(s, T::from_f64_lossy(1.0 / (dr as f64).sqrt()));
                let s = g.add(s, pad)?;
                let r = g.softmax(s)?;
                out[slot] = Some(g.reshape(r, &[rh, b, l, l])?);
            }
            Some(Relations {
                q: out[0].unwrap(),
                k: out[1].unwrap(),
                v: out[2].unwrap(),
                heads: rh,
            })
        }
    };

    let hidden = g.reshape(h2, &[b, l, d])?;
    Ok(ModelOutputs {
        logits,
        hidden,
        relations,
        gates: if opts.gates { gates } else { Vec::new() },
    })
}
