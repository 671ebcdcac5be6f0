use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// The six linear projections of a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SlotKind {
    Query,
    Key,
    Value,
    Output,
    FfnIn,
    FfnOut,
}

impl SlotKind {
    pub const ALL: [SlotKind; 6] = [
        SlotKind::Query,
        SlotKind::Key,
        SlotKind::Value,
        SlotKind::Output,
        SlotKind::FfnIn,
        SlotKind::FfnOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SlotKind::Query => "q",
            SlotKind::Key => "k",
            SlotKind::Value => "v",
            SlotKind::Output => "o",
            SlotKind::FfnIn => "ffn_in",
            SlotKind::FfnOut => "ffn_out",
        }
    }

    pub fn is_attention(self) -> bool {
        !matches!(self, SlotKind::FfnIn | SlotKind::FfnOut)
    }
}

impl FromStr for SlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SlotKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown slot kind `{s}`")))
    }
}

/// Address of a slot, written `layers.<i>.<kind>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotPath {
    pub layer: usize,
    pub kind: SlotKind,
}

impl SlotPath {
    pub fn new(layer: usize, kind: SlotKind) -> Self {
        Self { layer, kind }
    }

    /// Every `(layer, kind)` pair for `kinds` across `n_layers` layers,
    /// layer-major.
    pub fn grid(n_layers: usize, kinds: &[SlotKind]) -> Vec<SlotPath> {
        (0..n_layers)
            .flat_map(|l| kinds.iter().map(move |&k| SlotPath::new(l, k)))
            .collect()
    }
}

impl fmt::Display for SlotPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.layer, self.kind.name())
    }
}

impl FromStr for SlotPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("malformed slot path `{s}`"));
        let mut parts = s.splitn(3, '.');
        if parts.next() != Some("layers") {
            return Err(bad());
        }
        let layer = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let kind = parts.next().ok_or_else(bad)?.parse()?;
        Ok(SlotPath { layer, kind })
    }
}

impl Serialize for SlotPath {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SlotPath {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Frozen integer codes of a quantized slot, one scale per output row.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantState {
    pub bits: u8,
    pub codes: Vec<i8>,
    pub scales: Vec<f32>,
}

impl QuantState {
    pub fn qmax(bits: u8) -> i32 {
        (1 << (bits - 1)) - 1
    }

    pub fn dequantize<T: Element>(&self, d_out: usize, d_in: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(d_out * d_in);
        for r in 0..d_out {
            let s = self.scales[r] as f64;
            for c in 0..d_in {
                out.push(T::from_f64(self.codes[r * d_in + c] as f64 * s));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    Element,
    FfnColumn,
    AttentionHead,
}

impl Granularity {
    pub fn code(self) -> i8 {
        match self {
            Granularity::Element => 0,
            Granularity::FfnColumn => 1,
            Granularity::AttentionHead => 2,
        }
    }

    pub fn from_code(c: i8) -> Result<Self> {
        match c {
            0 => Ok(Granularity::Element),
            1 => Ok(Granularity::FfnColumn),
            2 => Ok(Granularity::AttentionHead),
            _ => Err(Error::Format(format!("unknown mask granularity {c}"))),
        }
    }
}

/// Binary keep-mask congruent to a slot weight. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    keep: Vec<bool>,
    granularity: Granularity,
    target: f64,
}

impl PruneMask {
    pub fn new(keep: Vec<bool>, granularity: Granularity, target: f64) -> Self {
        Self {
            keep,
            granularity,
            target,
        }
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    /// Sparsity the mask was built for.
    pub fn target(&self) -> f64 {
        self.target
    }

    pub fn zeros(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    /// Elementwise AND with another mask of the same extent.
    pub fn intersect(&self, other: &PruneMask) -> PruneMask {
        PruneMask {
            keep: self
                .keep
                .iter()
                .zip(&other.keep)
                .map(|(&a, &b)| a && b)
                .collect(),
            granularity: other.granularity,
            target: self.zeros().max(other.zeros()) as f64 / self.keep.len() as f64,
        }
    }
}

/// How a slot's weight is stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StorageMode {
    Dense,
    Quantized,
    Masked,
    QuantizedMasked,
}

/// One linear projection `y = x Wᵀ + b`.
///
/// `weight` always holds the effective dense values used by forward: the
/// dequantized codes for quantized slots, with masked coordinates at zero.
#[derive(Debug, Clone)]
pub struct LinearSlot<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub(crate) quant: Option<QuantState>,
    pub(crate) mask: Option<PruneMask>,
}

impl<T: Element> LinearSlot<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 2 || bias.shape() != [s[0]] {
            return Err(Error::dim(format!(
                "slot weight {:?} with bias {:?}",
                s,
                bias.shape()
            )));
        }
        Ok(Self {
            weight,
            bias,
            quant: None,
            mask: None,
        })
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn quant(&self) -> Option<&QuantState> {
        self.quant.as_ref()
    }

    pub fn mask(&self) -> Option<&PruneMask> {
        self.mask.as_ref()
    }

    pub fn storage_mode(&self) -> StorageMode {
        match (self.quant.is_some(), self.mask.is_some()) {
            (false, false) => StorageMode::Dense,
            (true, false) => StorageMode::Quantized,
            (false, true) => StorageMode::Masked,
            (true, true) => StorageMode::QuantizedMasked,
        }
    }

    /// Number of weight elements not removed by a mask.
    pub fn kept_weights(&self) -> usize {
        match &self.mask {
            Some(m) => m.keep().len() - m.zeros(),
            None => self.weight.len(),
        }
    }

    /// Installs a mask (intersected with any existing one) and zeroes the
    /// masked coordinates of the weight and of the integer codes.
    pub(crate) fn apply_mask(&mut self, mask: PruneMask) -> Result<()> {
        if mask.keep().len() != self.weight.len() {
            return Err(Error::dim("mask does not cover the slot weight"));
        }
        let mask = match &self.mask {
            Some(old) => old.intersect(&mask),
            None => mask,
        };
        for (w, &k) in self.weight.data_mut().iter_mut().zip(mask.keep()) {
            if !k {
                *w = T::zero();
            }
        }
        if let Some(q) = &mut self.quant {
            for (c, &k) in q.codes.iter_mut().zip(mask.keep()) {
                if !k {
                    *c = 0;
                }
            }
        }
        self.mask = Some(mask);
        Ok(())
    }

    /// Base projection without adapters. A trainable masked weight passes
    /// through a selection so masked coordinates receive no gradient.
    pub fn base_forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut w = tape.leaf(&self.weight);
        if self.weight.requires_grad() {
            if let Some(m) = &self.mask {
                w = tape.select(w, m.keep().to_vec())?;
            }
        }
        let b = tape.leaf(&self.bias);
        tape.linear(x, w, Some(b))
    }

    pub fn cast<U: Element>(&self) -> LinearSlot<U> {
        LinearSlot {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            quant: self.quant.clone(),
            mask: self.mask.clone(),
        }
    }
}
