//! A dense f64 reference transformer with pruned structures physically
//! removed, for checking the masked forward.

use minidisc::model::{Batch, ModelConfig, ParamStore, StructureKind, StructureMask};
use minidisc::tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Store with weights spread wider than the training init, so that masked
/// and unmasked outputs differ visibly.
pub fn spread_store<T: Real>(config: &ModelConfig, seed: u64, std: f64) -> ParamStore<T> {
    let base = ParamStore::<T>::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let tensors = base
        .tensors()
        .iter()
        .map(|t| {
            let noise = Tensor::<T>::randn(t.shape(), std, &mut rng);
            let data = t.data().iter().zip(noise.data()).map(|(a, b)| *a + *b).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        })
        .collect();
    ParamStore::from_tensors(config, tensors).unwrap()
}

pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.cols)
            .map(|c| self.b[c] + (0..self.rows).map(|r| x[r] * self.w[r * self.cols + c]).sum::<f64>())
            .collect()
    }
}

pub struct RefAttn {
    pub ln: (Vec<f64>, Vec<f64>),
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
    pub heads: usize,
}

pub struct RefLayer {
    pub attn: Option<RefAttn>,
    pub cross: Option<RefAttn>,
    pub ffn: Option<((Vec<f64>, Vec<f64>), Dense, Dense)>,
}

/// A model whose pruned heads and neurons have been physically deleted.
pub struct RefModel {
    pub tok: Vec<f64>,
    pub pos: Vec<f64>,
    pub d: usize,
    pub dh: usize,
    pub layers: Vec<RefLayer>,
    pub final_ln: (Vec<f64>, Vec<f64>),
    pub cls: Dense,
}

pub fn get<T: Real>(store: &ParamStore<T>, name: &str) -> (Vec<usize>, Vec<f64>) {
    let t = store.get(name).unwrap_or_else(|| panic!("missing {name}"));
    (t.shape().to_vec(), t.data().iter().map(|v| v.to_f64().unwrap()).collect())
}

pub fn take_cols(w: &[f64], rows: usize, cols: usize, keep: &[usize]) -> Vec<f64> {
    (0..rows).flat_map(|r| keep.iter().map(move |&c| w[r * cols + c])).collect()
}

pub fn take_rows(w: &[f64], cols: usize, keep: &[usize]) -> Vec<f64> {
    keep.iter().flat_map(|&r| w[r * cols..(r + 1) * cols].to_vec()).collect()
}

pub fn shrink_attn<T: Real>(store: &ParamStore<T>, prefix: &str, bits: &[bool], d: usize, dh: usize) -> Option<RefAttn> {
    let heads: Vec<usize> = (0..bits.len()).filter(|&h| bits[h]).collect();
    if heads.is_empty() {
        return None;
    }
    let cols: Vec<usize> = heads.iter().flat_map(|&h| h * dh..(h + 1) * dh).collect();
    let proj = |n: &str| {
        let (_, w) = get(store, &format!("{prefix}.{n}.w"));
        let (_, b) = get(store, &format!("{prefix}.{n}.b"));
        Dense {
            rows: d,
            cols: cols.len(),
            w: take_cols(&w, d, d, &cols),
            b: cols.iter().map(|&c| b[c]).collect(),
        }
    };
    let (_, ow) = get(store, &format!("{prefix}.o.w"));
    let (_, ob) = get(store, &format!("{prefix}.o.b"));
    Some(RefAttn {
        ln: (get(store, &format!("{prefix}.ln.g")).1, get(store, &format!("{prefix}.ln.b")).1),
        q: proj("q"),
        k: proj("k"),
        v: proj("v"),
        o: Dense {
            rows: cols.len(),
            cols: d,
            w: take_rows(&ow, d, &cols),
            b: ob,
        },
        heads: heads.len(),
    })
}

pub fn shrink<T: Real>(store: &ParamStore<T>, mask: &StructureMask) -> RefModel {
    let c = store.config();
    let (d, dh, f) = (c.d_model, c.head_dim(), c.d_ffn);
    let layers = mask
        .layers
        .iter()
        .enumerate()
        .map(|(l, lm)| {
            let neurons: Vec<usize> = (0..f).filter(|&j| lm.ffn_neurons[j]).collect();
            let ffn = (!neurons.is_empty()).then(|| {
                let (_, w1) = get(store, &format!("layer{l}.ffn.fc1.w"));
                let (_, b1) = get(store, &format!("layer{l}.ffn.fc1.b"));
                let (_, w2) = get(store, &format!("layer{l}.ffn.fc2.w"));
                let (_, b2) = get(store, &format!("layer{l}.ffn.fc2.b"));
                (
                    (get(store, &format!("layer{l}.ffn.ln.g")).1, get(store, &format!("layer{l}.ffn.ln.b")).1),
                    Dense {
                        rows: d,
                        cols: neurons.len(),
                        w: take_cols(&w1, d, f, &neurons),
                        b: neurons.iter().map(|&j| b1[j]).collect(),
                    },
                    Dense {
                        rows: neurons.len(),
                        cols: d,
                        w: take_rows(&w2, d, &neurons),
                        b: b2,
                    },
                )
            });
            RefLayer {
                attn: shrink_attn(store, &format!("layer{l}.attn"), &lm.self_heads, d, dh),
                cross: lm
                    .cross_heads
                    .as_ref()
                    .and_then(|bits| shrink_attn(store, &format!("layer{l}.cross"), bits, d, dh)),
                ffn,
            }
        })
        .collect();
    RefModel {
        tok: get(store, "emb.tok").1,
        pos: get(store, "emb.pos").1,
        d,
        dh,
        layers,
        final_ln: (get(store, "final.ln.g").1, get(store, "final.ln.b").1),
        cls: Dense {
            rows: d,
            cols: c.n_classes,
            w: get(store, "cls.w").1,
            b: get(store, "cls.b").1,
        },
    }
}

pub fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn attend(a: &RefAttn, x: &[Vec<f64>], memory: Option<&[Vec<f64>]>, valid: usize, dh: usize) -> Vec<Vec<f64>> {
    let xn: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, &a.ln.0, &a.ln.1)).collect();
    let kv_src = memory.map(|m| m.to_vec()).unwrap_or_else(|| xn.clone());
    let q: Vec<Vec<f64>> = xn.iter().map(|r| a.q.apply(r)).collect();
    let k: Vec<Vec<f64>> = kv_src.iter().map(|r| a.k.apply(r)).collect();
    let v: Vec<Vec<f64>> = kv_src.iter().map(|r| a.v.apply(r)).collect();
    let mut out = Vec::new();
    for qi in &q {
        let mut ctx = vec![0.0; a.heads * dh];
        for h in 0..a.heads {
            let sl = h * dh..(h + 1) * dh;
            let scores: Vec<f64> = (0..valid)
                .map(|j| qi[sl.clone()].iter().zip(&k[j][sl.clone()]).map(|(p, q)| p * q).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                let p = (s - m).exp() / z;
                for t in 0..dh {
                    ctx[h * dh + t] += p * v[j][h * dh + t];
                }
            }
        }
        out.push(a.o.apply(&ctx));
    }
    out
}

pub fn reference_logits(m: &RefModel, batch: &Batch) -> Vec<f64> {
    let l = batch.seq_len;
    let mut logits = Vec::new();
    for (bi, &valid) in batch.lengths.iter().enumerate() {
        let emb: Vec<Vec<f64>> = (0..l)
            .map(|t| {
                let id = batch.ids[bi * l + t];
                (0..m.d).map(|c| m.tok[id * m.d + c] + m.pos[t * m.d + c]).collect()
            })
            .collect();
        let mut x = emb.clone();
        for layer in &m.layers {
            if let Some(a) = &layer.attn {
                let o = attend(a, &x, None, valid, m.dh);
                x.iter_mut().zip(o).for_each(|(r, o)| r.iter_mut().zip(o).for_each(|(a, b)| *a += b));
            }
            if let Some(a) = &layer.cross {
                let o = attend(a, &x, Some(&emb), valid, m.dh);
                x.iter_mut().zip(o).for_each(|(r, o)| r.iter_mut().zip(o).for_each(|(a, b)| *a += b));
            }
            if let Some((ln, fc1, fc2)) = &layer.ffn {
                for r in x.iter_mut() {
                    let h: Vec<f64> = fc1.apply(&layer_norm(r, &ln.0, &ln.1)).into_iter().map(gelu).collect();
                    r.iter_mut().zip(fc2.apply(&h)).for_each(|(a, b)| *a += b);
                }
            }
        }
        let mut pooled = vec![0.0; m.d];
        for r in x.iter().take(valid) {
            let n = layer_norm(r, &m.final_ln.0, &m.final_ln.1);
            pooled.iter_mut().zip(n).for_each(|(p, v)| *p += v / valid as f64);
        }
        logits.extend(m.cls.apply(&pooled));
    }
    logits
}

pub fn random_mask<R: Rng>(config: &ModelConfig, rng: &mut R) -> StructureMask {
    let mut m = StructureMask::full(config);
    for l in &mut m.layers {
        let p: f64 = rng.gen_range(0.0..1.0);
        for k in StructureKind::ALL {
            if let Some(bits) = l.bits_mut(k) {
                bits.iter_mut().for_each(|b| *b = rng.gen_bool(p.max(0.15)));
            }
        }
        if rng.gen_bool(0.15) {
            l.self_heads.iter_mut().for_each(|b| *b = false);
        }
        if rng.gen_bool(0.15) {
            l.ffn_neurons.iter_mut().for_each(|b| *b = false);
        }
    }
    m
}

pub fn max_diff<T: Real>(a: &[T], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x.to_f64().unwrap() - y).abs()).fold(0.0, f64::max)
}

