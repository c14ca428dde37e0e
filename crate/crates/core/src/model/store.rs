use std::cell::Cell;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, INIT_STD};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Tensor indices of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub ln_g: usize,
    pub ln_b: usize,
    pub q_w: usize,
    pub q_b: usize,
    pub k_w: usize,
    pub k_b: usize,
    pub v_w: usize,
    pub v_b: usize,
    pub o_w: usize,
    pub o_b: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerIds {
    pub attn: AttnIds,
    pub cross: Option<AttnIds>,
    pub ffn_ln_g: usize,
    pub ffn_ln_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Auxiliary relation projections (queries, keys, values) on top of the last
/// hidden states. Only used by the relation distillation objective.
#[derive(Clone, Copy, Debug)]
pub struct RelationIds {
    pub q_w: usize,
    pub q_b: usize,
    pub k_w: usize,
    pub k_b: usize,
    pub v_w: usize,
    pub v_b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Names, shapes and roles of every tensor of a model, in storage order.
#[derive(Clone, Debug)]
pub struct Layout {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub(crate) inits: Vec<Init>,
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerIds>,
    pub final_ln_g: usize,
    pub final_ln_b: usize,
    pub cls_w: usize,
    pub cls_b: usize,
    pub relation: RelationIds,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.add(format!("{prefix}.w"), vec![fan_in, fan_out], Init::Normal);
        let b = self.add(format!("{prefix}.b"), vec![fan_out], Init::Zeros);
        (w, b)
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) -> (usize, usize) {
        let g = self.add(format!("{prefix}.g"), vec![d], Init::Ones);
        let b = self.add(format!("{prefix}.b"), vec![d], Init::Zeros);
        (g, b)
    }

    fn attention(&mut self, prefix: &str, d: usize) -> AttnIds {
        let (ln_g, ln_b) = self.layer_norm(&format!("{prefix}.ln"), d);
        let (q_w, q_b) = self.linear(&format!("{prefix}.q"), d, d);
        let (k_w, k_b) = self.linear(&format!("{prefix}.k"), d, d);
        let (v_w, v_b) = self.linear(&format!("{prefix}.v"), d, d);
        let (o_w, o_b) = self.linear(&format!("{prefix}.o"), d, d);
        AttnIds {
            ln_g,
            ln_b,
            q_w,
            q_b,
            k_w,
            k_b,
            v_w,
            v_b,
            o_w,
            o_b,
        }
    }
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let mut b = Builder {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
        };
        let tok_emb = b.add("emb.tok".into(), vec![config.vocab, d], Init::Normal);
        let pos_emb = b.add("emb.pos".into(), vec![config.max_len, d], Init::Normal);
        let layers = (0..config.layers)
            .map(|l| {
                let attn = b.attention(&format!("layer{l}.attn"), d);
                let cross = config
                    .with_cross_attention
                    .then(|| b.attention(&format!("layer{l}.cross"), d));
                let (ffn_ln_g, ffn_ln_b) = b.layer_norm(&format!("layer{l}.ffn.ln"), d);
                let (w1, b1) = b.linear(&format!("layer{l}.ffn.fc1"), d, config.d_ffn);
                let (w2, b2) = b.linear(&format!("layer{l}.ffn.fc2"), config.d_ffn, d);
                LayerIds {
                    attn,
                    cross,
                    ffn_ln_g,
                    ffn_ln_b,
                    w1,
                    b1,
                    w2,
                    b2,
                }
            })
            .collect();
        let (final_ln_g, final_ln_b) = b.layer_norm("final.ln", d);
        let (cls_w, cls_b) = b.linear("cls", d, config.n_classes);
        let (q_w, q_b) = b.linear("rel.q", d, d);
        let (k_w, k_b) = b.linear("rel.k", d, d);
        let (v_w, v_b) = b.linear("rel.v", d, d);
        Self {
            names: b.names,
            shapes: b.shapes,
            inits: b.inits,
            tok_emb,
            pos_emb,
            layers,
            final_ln_g,
            final_ln_b,
            cls_w,
            cls_b,
            relation: RelationIds {
                q_w,
                q_b,
                k_w,
                k_b,
                v_w,
                v_b,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

fn track_alloc(bytes: usize) {
    LIVE.with(|l| {
        let v = l.get() + bytes;
        l.set(v);
        PEAK.with(|p| p.set(p.get().max(v)));
    });
}

fn track_free(bytes: usize) {
    LIVE.with(|l| l.set(l.get().saturating_sub(bytes)));
}

/// Bytes held by live parameter stores on this thread.
pub fn param_bytes_live() -> usize {
    LIVE.with(Cell::get)
}

/// High-water mark of [`param_bytes_live`] since the last reset.
pub fn param_bytes_peak() -> usize {
    PEAK.with(Cell::get)
}

pub fn reset_param_peak() {
    PEAK.with(|p| p.set(param_bytes_live()));
}

/// One full teacher-shaped set of weights. Candidates never own weights;
/// they view a store through a mask.
#[derive(Debug)]
pub struct ParamStore<T: Real = f32> {
    config: ModelConfig,
    layout: Layout,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    /// Scaled-normal weights (std 0.02), zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .shapes
            .iter()
            .zip(&layout.inits)
            .map(|(shape, init)| match init {
                Init::Normal => Tensor::randn(shape, INIT_STD, &mut rng),
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, T::one()),
            })
            .collect();
        Ok(Self::from_parts(config.clone(), layout, tensors))
    }

    fn from_parts(config: ModelConfig, layout: Layout, tensors: Vec<Tensor<T>>) -> Self {
        let s = Self {
            config,
            layout,
            tensors,
        };
        track_alloc(s.bytes());
        s
    }

    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        if tensors.len() != layout.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.shape() != layout.shapes[i].as_slice() {
                return Err(Error::InvalidArgument(format!(
                    "{}: expected shape {:?}, got {:?}",
                    layout.names[i],
                    layout.shapes[i],
                    t.shape()
                )));
            }
        }
        Ok(Self::from_parts(config.clone(), layout, tensors))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.layout.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn bytes(&self) -> usize {
        self.numel() * std::mem::size_of::<T>()
    }

    /// Puts every tensor on `graph` as a leaf, in layout order.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| graph.leaf(t.clone(), trainable))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore::from_parts(
            self.config.clone(),
            self.layout.clone(),
            self.tensors.iter().map(Tensor::cast).collect(),
        )
    }

    /// Overwrites every tensor with `other`'s values. Shapes must agree.
    pub fn copy_from(&mut self, other: &ParamStore<T>) {
        assert_eq!(self.config, other.config, "copy_from across configs");
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
    }
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self::from_parts(self.config.clone(), self.layout.clone(), self.tensors.clone())
    }
}

impl<T: Real> Drop for ParamStore<T> {
    fn drop(&mut self) {
        track_free(self.bytes());
    }
}

impl<T: Real> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    nbytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

const MAGIC_LEN: usize = 8;

impl ParamStore<f32> {
    /// Checkpoint bytes: an 8-byte little-endian header length, a JSON header
    /// listing tensor names, shapes, dtype and byte offsets (relative to the
    /// start of the data section), then raw little-endian `f32` data.
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in self.layout.names.iter().zip(&self.tensors) {
            let nbytes = t.numel() * 4;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(MAGIC_LEN + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC_LEN {
            return Err(err("truncated header length"));
        }
        let hlen = u64::from_le_bytes(bytes[..MAGIC_LEN].try_into().unwrap()) as usize;
        let data_start = MAGIC_LEN
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| err("header length exceeds file"))?;
        let header: Header = serde_json::from_slice(&bytes[MAGIC_LEN..data_start])?;
        let data = &bytes[data_start..];
        let layout = Layout::new(&header.config);
        if header.tensors.len() != layout.len() {
            return Err(err("tensor count does not match config"));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for (e, want) in header.tensors.iter().zip(&layout.names) {
            if &e.name != want {
                return Err(Error::Checkpoint(format!("expected tensor {want}, found {}", e.name)));
            }
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let end = e
                .offset
                .checked_add(e.nbytes)
                .filter(|&x| x <= data.len())
                .ok_or_else(|| Error::Checkpoint(format!("{}: data out of range", e.name)))?;
            if e.nbytes != crate::tensor::numel(&e.shape) * 4 {
                return Err(Error::Checkpoint(format!("{}: byte count does not match shape", e.name)));
            }
            let vals = data[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::new(e.shape.clone(), vals)?);
        }
        Self::from_tensors(&header.config, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_checkpoint_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 4,
            d_model: 8,
            d_ffn: 16,
            vocab: 32,
            max_len: 8,
            n_classes: 3,
            with_cross_attention: false,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ParamStore::<f32>::init(&cfg(), 1).unwrap();
        let b = ParamStore::<f32>::init(&cfg(), 1).unwrap();
        let c = ParamStore::<f32>::init(&cfg(), 2).unwrap();
        assert!(a == b);
        assert!(a.tensors().iter().zip(c.tensors()).any(|(x, y)| x != y));
    }

    #[test]
    fn init_biases_zero_and_gains_one() {
        let s = ParamStore::<f32>::init(&cfg(), 3).unwrap();
        assert!(s.get("layer0.attn.q.b").unwrap().data().iter().all(|v| *v == 0.0));
        assert!(s.get("final.ln.g").unwrap().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let s = ParamStore::<f32>::init(&cfg(), 9).unwrap();
        let bytes = s.to_checkpoint_bytes().unwrap();
        let back = ParamStore::from_checkpoint_bytes(&bytes).unwrap();
        for (a, b) in s.tensors().iter().zip(back.tensors()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back.to_checkpoint_bytes().unwrap(), bytes);
    }

    #[test]
    fn checkpoint_rejects_truncation() {
        let s = ParamStore::<f32>::init(&cfg(), 9).unwrap();
        let bytes = s.to_checkpoint_bytes().unwrap();
        assert!(ParamStore::from_checkpoint_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(ParamStore::from_checkpoint_bytes(&bytes[..4]).is_err());
    }

    #[test]
    fn tracker_counts_clones() {
        let before = param_bytes_live();
        let s = ParamStore::<f32>::init(&cfg(), 0).unwrap();
        let c = s.clone();
        assert_eq!(param_bytes_live(), before + 2 * s.bytes());
        drop(c);
        assert_eq!(param_bytes_live(), before + s.bytes());
    }
}
