use std::fmt;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{invalid, Result};

/// The three prunable structure types.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    SelfHead,
    CrossHead,
    FfnNeuron,
}

impl StructureKind {
    pub const ALL: [StructureKind; 3] = [Self::SelfHead, Self::CrossHead, Self::FfnNeuron];
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SelfHead => "self_head",
            Self::CrossHead => "cross_head",
            Self::FfnNeuron => "ffn_neuron",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LayerMask {
    pub self_heads: Vec<bool>,
    pub cross_heads: Option<Vec<bool>>,
    pub ffn_neurons: Vec<bool>,
}

impl LayerMask {
    pub fn skip_attn(&self) -> bool {
        self.self_heads.iter().all(|b| !b)
    }

    pub fn skip_cross(&self) -> bool {
        self.cross_heads.as_ref().is_none_or(|c| c.iter().all(|b| !b))
    }

    pub fn skip_ffn(&self) -> bool {
        self.ffn_neurons.iter().all(|b| !b)
    }

    pub fn bits(&self, kind: StructureKind) -> Option<&[bool]> {
        match kind {
            StructureKind::SelfHead => Some(&self.self_heads),
            StructureKind::CrossHead => self.cross_heads.as_deref(),
            StructureKind::FfnNeuron => Some(&self.ffn_neurons),
        }
    }

    pub fn bits_mut(&mut self, kind: StructureKind) -> Option<&mut Vec<bool>> {
        match kind {
            StructureKind::SelfHead => Some(&mut self.self_heads),
            StructureKind::CrossHead => self.cross_heads.as_mut(),
            StructureKind::FfnNeuron => Some(&mut self.ffn_neurons),
        }
    }
}

pub(crate) fn kept(bits: &[bool]) -> Vec<usize> {
    bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect()
}

/// Per-layer keep bits for heads (self and, optionally, cross) and
/// feed-forward neurons. Skip flags are derived: a block whose bits are all
/// zero is bypassed.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StructureMask {
    pub layers: Vec<LayerMask>,
}

impl StructureMask {
    pub fn full(config: &ModelConfig) -> Self {
        Self::filled(config, true)
    }

    pub fn empty(config: &ModelConfig) -> Self {
        Self::filled(config, false)
    }

    fn filled(config: &ModelConfig, bit: bool) -> Self {
        let layer = LayerMask {
            self_heads: vec![bit; config.heads],
            cross_heads: config.with_cross_attention.then(|| vec![bit; config.heads]),
            ffn_neurons: vec![bit; config.d_ffn],
        };
        Self {
            layers: vec![layer; config.layers],
        }
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.layers {
            return Err(invalid(format!(
                "mask has {} layers, model has {}",
                self.layers.len(),
                config.layers
            )));
        }
        for (l, m) in self.layers.iter().enumerate() {
            if m.self_heads.len() != config.heads || m.ffn_neurons.len() != config.d_ffn {
                return Err(invalid(format!(
                    "mask layer {l} has {} heads / {} neurons, model has {} / {}",
                    m.self_heads.len(),
                    m.ffn_neurons.len(),
                    config.heads,
                    config.d_ffn
                )));
            }
            match (&m.cross_heads, config.with_cross_attention) {
                (Some(c), true) if c.len() == config.heads => {}
                (None, false) => {}
                _ => return Err(invalid(format!("mask layer {l} cross-attention bits do not match model"))),
            }
        }
        Ok(())
    }

    /// True if every kept bit of `self` is also kept in `other`.
    pub fn is_subset_of(&self, other: &StructureMask) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                StructureKind::ALL.iter().all(|&k| match (a.bits(k), b.bits(k)) {
                    (Some(x), Some(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| !*p || *q),
                    (None, None) => true,
                    _ => false,
                })
            })
    }

    pub fn count_kept(&self, kind: StructureKind) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.bits(kind))
            .map(|b| b.iter().filter(|x| **x).count())
            .sum()
    }

    /// Elementwise OR.
    pub fn union(&self, other: &StructureMask) -> StructureMask {
        let or = |a: &[bool], b: &[bool]| a.iter().zip(b).map(|(x, y)| *x || *y).collect::<Vec<_>>();
        StructureMask {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| LayerMask {
                    self_heads: or(&a.self_heads, &b.self_heads),
                    cross_heads: match (&a.cross_heads, &b.cross_heads) {
                        (Some(x), Some(y)) => Some(or(x, y)),
                        _ => None,
                    },
                    ffn_neurons: or(&a.ffn_neurons, &b.ffn_neurons),
                })
                .collect(),
        }
    }

    /// Surviving (self heads, neurons) per layer.
    pub fn per_layer_counts(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| {
                (
                    l.self_heads.iter().filter(|b| **b).count(),
                    l.ffn_neurons.iter().filter(|b| **b).count(),
                )
            })
            .collect()
    }
}

/// Bit vector as lowercase hex, most significant nibble first, bit 0 of the
/// vector being the lowest bit of the last nibble.
pub fn bits_to_hex(bits: &[bool]) -> String {
    let nibbles = bits.len().div_ceil(4).max(1);
    (0..nibbles)
        .rev()
        .map(|n| {
            let v = (0..4).fold(0u8, |acc, b| {
                let i = n * 4 + b;
                acc | (u8::from(bits.get(i).copied().unwrap_or(false)) << b)
            });
            char::from_digit(v as u32, 16).unwrap()
        })
        .collect()
}

pub fn hex_to_bits(hex: &str, len: usize) -> Result<Vec<bool>> {
    let digits: Vec<u32> = hex
        .chars()
        .map(|c| c.to_digit(16).ok_or_else(|| invalid(format!("bad hex digit {c:?}"))))
        .collect::<Result<_>>()?;
    let mut bits = vec![false; len];
    for (n, d) in digits.iter().rev().enumerate() {
        for b in 0..4 {
            let i = n * 4 + b;
            let set = d >> b & 1 == 1;
            if i < len {
                bits[i] = set;
            } else if set {
                return Err(invalid(format!("hex {hex:?} has bits beyond length {len}")));
            }
        }
    }
    Ok(bits)
}

#[derive(Serialize, Deserialize)]
struct LayerMaskRepr {
    self_heads: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    cross_heads: Option<String>,
    ffn_neurons: String,
    n_heads: usize,
    n_neurons: usize,
}

impl Serialize for LayerMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        LayerMaskRepr {
            self_heads: bits_to_hex(&self.self_heads),
            cross_heads: self.cross_heads.as_deref().map(bits_to_hex),
            ffn_neurons: bits_to_hex(&self.ffn_neurons),
            n_heads: self.self_heads.len(),
            n_neurons: self.ffn_neurons.len(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LayerMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = LayerMaskRepr::deserialize(d)?;
        let conv = |h: &str, n| hex_to_bits(h, n).map_err(serde::de::Error::custom);
        Ok(LayerMask {
            self_heads: conv(&r.self_heads, r.n_heads)?,
            cross_heads: r.cross_heads.as_deref().map(|h| conv(h, r.n_heads)).transpose()?,
            ffn_neurons: conv(&r.ffn_neurons, r.n_neurons)?,
        })
    }
}

impl Serialize for StructureMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.layers.serialize(s)
    }
}

impl<'de> Deserialize<'de> for StructureMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(StructureMask {
            layers: Vec::deserialize(d)?,
        })
    }
}
