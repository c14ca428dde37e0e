//! Maskable transformer encoder classifier.
//!
//! Every self-attention head, optional cross-attention head and feed-forward
//! neuron is gated by a bit of a [`StructureMask`]. Gates enter the graph as
//! multipliers on head/neuron outputs, so their gradients come out of an
//! ordinary backward pass. Structures whose gate is 0 are not computed at
//! all: the forward gathers the surviving weight slices, which gives exactly
//! the output a physically shrunk model would produce.

mod count;
mod forward;
mod gradcheck;
mod mask;
mod store;

pub use count::{param_count, scale_of, structure_params, visibility, ParamCount, Visibility};
pub use forward::{forward, Batch, ForwardOptions, LayerGates, ModelOutputs, Relations};
pub use gradcheck::{check_model_gradients, random_batch};
pub use mask::{LayerMask, StructureKind, StructureMask};
pub use store::{param_bytes_live, param_bytes_peak, reset_param_peak, AttnIds, Layout, LayerIds, ParamStore};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
pub const PAD_BIAS: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub n_classes: usize,
    /// Houses a cross-attention block (gated by `cross_heads`) in every
    /// layer. The memory it attends to is the embedding output.
    #[serde(default)]
    pub with_cross_attention: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("model.{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "model.d_model ({}) must be divisible by model.heads ({})",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Default capacity-gap teacher.
    pub fn capacity_gap_teacher() -> Self {
        Self {
            layers: 6,
            heads: 8,
            d_model: 128,
            d_ffn: 512,
            vocab: 64,
            max_len: 32,
            n_classes: 2,
            with_cross_attention: false,
        }
    }
}
