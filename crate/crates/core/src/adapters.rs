//! Task adapters: low-rank LoRA pairs and non-linear recovery bypasses,
//! grouped per task, plus inheritance of LoRA weights from a teacher.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{SlotPath, TransformerModel};
use crate::rng::RngState;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Standard deviation of the Gaussian used for `A` and `D`.
pub const INIT_STD: f64 = 0.02;

/// Low-rank update `s · (x Aᵀ) Bᵀ` with `A: r×d_in`, `B: d_out×r`.
#[derive(Debug, Clone)]
pub struct LoraAdapter<T: Element> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub scaling: f64,
}

impl<T: Element> LoraAdapter<T> {
    /// `A ~ N(0, 0.02²)`, `B = 0`, both trainable.
    pub fn new(d_in: usize, d_out: usize, rank: usize, rng: &mut RngState) -> Result<Self> {
        if rank == 0 || d_in == 0 || d_out == 0 {
            return Err(Error::config("LoRA rank and dims must be positive"));
        }
        Ok(Self {
            a: Tensor::randn(&[rank, d_in], INIT_STD, rng).with_grad(),
            b: Tensor::zeros(&[d_out, rank]).with_grad(),
            scaling: 1.0,
        })
    }

    pub fn from_parts(a: Tensor<T>, b: Tensor<T>, scaling: f64) -> Result<Self> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[0] != b.shape()[1] {
            return Err(Error::dim(format!(
                "LoRA A {:?} and B {:?} disagree on rank",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self { a, b, scaling })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn contribution(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let k = *tape.shape(x).last().unwrap();
        if k != self.d_in() {
            return Err(Error::dim(format!(
                "LoRA expects input width {}, got {k}",
                self.d_in()
            )));
        }
        let a = tape.leaf(&self.a);
        let b = tape.leaf(&self.b);
        let h = tape.linear(x, a, None)?;
        let y = tape.linear(h, b, None)?;
        Ok(if self.scaling == 1.0 {
            y
        } else {
            tape.scale(y, T::from_f64(self.scaling))
        })
    }
}

/// Activation between the down and up projections of a recovery adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sigma {
    Relu,
    /// Linear pass-through, used only to compare against dense oracles.
    Identity,
}

impl Sigma {
    pub fn code(self) -> f64 {
        match self {
            Sigma::Relu => 0.0,
            Sigma::Identity => 1.0,
        }
    }

    pub fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(Sigma::Relu),
            1 => Ok(Sigma::Identity),
            _ => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }
}

/// Recovery bypass `σ(x D) U` with `D: d_in×r`, `U: r×d_out`.
#[derive(Debug, Clone)]
pub struct RecoveryAdapter<T: Element> {
    pub d: Tensor<T>,
    pub u: Tensor<T>,
    pub sigma: Sigma,
}

impl<T: Element> RecoveryAdapter<T> {
    /// `D ~ N(0, 0.02²)`, `U = 0`, σ = relu.
    pub fn new(d_in: usize, d_out: usize, rank: usize, rng: &mut RngState) -> Result<Self> {
        if rank == 0 || d_in == 0 || d_out == 0 {
            return Err(Error::config("recovery rank and dims must be positive"));
        }
        Ok(Self {
            d: Tensor::randn(&[d_in, rank], INIT_STD, rng).with_grad(),
            u: Tensor::zeros(&[rank, d_out]).with_grad(),
            sigma: Sigma::Relu,
        })
    }

    pub fn from_parts(d: Tensor<T>, u: Tensor<T>, sigma: Sigma) -> Result<Self> {
        if d.shape().len() != 2 || u.shape().len() != 2 || d.shape()[1] != u.shape()[0] {
            return Err(Error::dim(format!(
                "recovery D {:?} and U {:?} disagree on rank",
                d.shape(),
                u.shape()
            )));
        }
        Ok(Self { d, u, sigma })
    }

    pub fn rank(&self) -> usize {
        self.d.shape()[1]
    }

    pub fn d_in(&self) -> usize {
        self.d.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.d.len() + self.u.len()
    }

    pub fn contribution(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let k = *shape.last().unwrap();
        if k != self.d_in() {
            return Err(Error::dim(format!(
                "recovery adapter expects input width {}, got {k}",
                self.d_in()
            )));
        }
        let x2 = if shape.len() == 2 {
            x
        } else {
            let rows = shape.iter().product::<usize>() / k;
            tape.reshape(x, vec![rows, k])?
        };
        let d = tape.leaf(&self.d);
        let u = tape.leaf(&self.u);
        let h = tape.matmul(x2, d)?;
        let h = match self.sigma {
            Sigma::Relu => tape.relu(h),
            Sigma::Identity => h,
        };
        let y = tape.matmul(h, u)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = self.d_out();
            tape.reshape(y, out_shape)
        }
    }
}

#[derive(Debug, Clone)]
pub enum Adapter<T: Element> {
    Lora(LoraAdapter<T>),
    Recovery(RecoveryAdapter<T>),
}

impl<T: Element> Adapter<T> {
    pub fn d_in(&self) -> usize {
        match self {
            Adapter::Lora(l) => l.d_in(),
            Adapter::Recovery(r) => r.d_in(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            Adapter::Lora(l) => l.d_out(),
            Adapter::Recovery(r) => r.d_out(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Adapter::Lora(l) => l.param_count(),
            Adapter::Recovery(r) => r.param_count(),
        }
    }

    pub fn contribution(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Adapter::Lora(l) => l.contribution(tape, x),
            Adapter::Recovery(r) => r.contribution(tape, x),
        }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 2] {
        match self {
            Adapter::Lora(l) => [&l.a, &l.b],
            Adapter::Recovery(r) => [&r.d, &r.u],
        }
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 2] {
        match self {
            Adapter::Lora(l) => [&mut l.a, &mut l.b],
            Adapter::Recovery(r) => [&mut r.d, &mut r.u],
        }
    }

    /// Record-name suffixes of [`Adapter::tensors`].
    pub fn tensor_names(&self) -> [&'static str; 2] {
        match self {
            Adapter::Lora(_) => ["A", "B"],
            Adapter::Recovery(_) => ["D", "U"],
        }
    }
}

/// Where an adapter set's initial values came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Scratch,
    InheritedFrom(String),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Scratch => write!(f, "scratch"),
            Provenance::InheritedFrom(id) => write!(f, "inherited-from:{id}"),
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "scratch" {
            Ok(Provenance::Scratch)
        } else if let Some(id) = s.strip_prefix("inherited-from:") {
            Ok(Provenance::InheritedFrom(id.to_string()))
        } else {
            Err(Error::Format(format!("unknown provenance `{s}`")))
        }
    }
}

/// All adapters belonging to one task, keyed by the slot they attach to.
#[derive(Debug, Clone)]
pub struct AdapterSet<T: Element> {
    pub task: String,
    pub provenance: Provenance,
    pub lora: BTreeMap<SlotPath, LoraAdapter<T>>,
    pub recovery: BTreeMap<SlotPath, RecoveryAdapter<T>>,
}

impl<T: Element> AdapterSet<T> {
    pub fn new(task: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            provenance: Provenance::Scratch,
            lora: BTreeMap::new(),
            recovery: BTreeMap::new(),
        }
    }

    /// Fresh LoRA adapters of `rank` on each of `slots` of `model`.
    pub fn fresh_lora(
        task: &str,
        model: &TransformerModel<T>,
        slots: &[SlotPath],
        rank: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        let mut set = Self::new(task);
        for path in slots {
            let slot = model.slot(path)?;
            let l = LoraAdapter::new(slot.d_in(), slot.d_out(), rank, rng)?;
            set.lora.insert(*path, l);
        }
        Ok(set)
    }

    /// Adds fresh recovery adapters of `rank` on each of `slots`.
    pub fn add_fresh_recovery(
        &mut self,
        model: &TransformerModel<T>,
        slots: &[SlotPath],
        rank: usize,
        rng: &mut RngState,
    ) -> Result<()> {
        for path in slots {
            let slot = model.slot(path)?;
            let r = RecoveryAdapter::new(slot.d_in(), slot.d_out(), rank, rng)?;
            self.recovery.insert(*path, r);
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.lora.is_empty() && self.recovery.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.lora.values().map(|l| l.param_count()).sum::<usize>()
            + self
                .recovery
                .values()
                .map(|r| r.param_count())
                .sum::<usize>()
    }

    /// Content hash of the adapter values; used as the checkpoint id in
    /// inheritance provenance tags.
    pub fn checkpoint_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.task.as_bytes());
        for (path, l) in &self.lora {
            h.update(path.to_string().as_bytes());
            for t in [&l.a, &l.b] {
                for x in t.data() {
                    h.update(x.as_f64().to_le_bytes());
                }
            }
        }
        for (path, r) in &self.recovery {
            h.update(path.to_string().as_bytes());
            for t in [&r.d, &r.u] {
                for x in t.data() {
                    h.update(x.as_f64().to_le_bytes());
                }
            }
        }
        hex::encode(&h.finalize()[..6])
    }

    pub fn set_trainable(&mut self, flag: bool) {
        for l in self.lora.values_mut() {
            l.a.set_requires_grad(flag);
            l.b.set_requires_grad(flag);
        }
        for r in self.recovery.values_mut() {
            r.d.set_requires_grad(flag);
            r.u.set_requires_grad(flag);
        }
    }

    pub fn cast<U: Element>(&self) -> AdapterSet<U> {
        AdapterSet {
            task: self.task.clone(),
            provenance: self.provenance.clone(),
            lora: self
                .lora
                .iter()
                .map(|(p, l)| {
                    (
                        *p,
                        LoraAdapter {
                            a: l.a.cast(),
                            b: l.b.cast(),
                            scaling: l.scaling,
                        },
                    )
                })
                .collect(),
            recovery: self
                .recovery
                .iter()
                .map(|(p, r)| {
                    (
                        *p,
                        RecoveryAdapter {
                            d: r.d.cast(),
                            u: r.u.cast(),
                            sigma: r.sigma,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Copies the teacher's LoRA weights into a new set for `student`.
///
/// Every teacher slot must exist in the student with unchanged input and
/// output widths. The copies are trainable; the teacher is not touched.
/// Only weights are inherited, never optimizer state.
pub fn inherit<T: Element>(
    teacher_set: &AdapterSet<T>,
    student: &TransformerModel<T>,
) -> Result<AdapterSet<T>> {
    let mut out = AdapterSet::new(teacher_set.task.clone());
    out.provenance = Provenance::InheritedFrom(teacher_set.checkpoint_id());
    for (path, l) in &teacher_set.lora {
        let slot = student.slot(path).map_err(|_| Error::Inheritance {
            slot: path.to_string(),
            reason: "slot does not exist in the student model".into(),
        })?;
        if slot.d_in() != l.d_in() || slot.d_out() != l.d_out() {
            return Err(Error::Inheritance {
                slot: path.to_string(),
                reason: format!(
                    "teacher adapter is {}→{} but student slot is {}→{}",
                    l.d_in(),
                    l.d_out(),
                    slot.d_in(),
                    slot.d_out()
                ),
            });
        }
        let mut copy = l.clone();
        copy.a.set_requires_grad(true);
        copy.b.set_requires_grad(true);
        copy.a.zero_grad();
        copy.b.zero_grad();
        out.lora.insert(*path, copy);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_lora(l: &LoraAdapter<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = l.contribution(&mut tape, xv).unwrap();
        tape.to_tensor(y)
    }

    #[test]
    fn fresh_lora_contributes_zero() {
        let mut rng = RngState::new(1, 0);
        let l = LoraAdapter::<f64>::new(6, 5, 3, &mut rng).unwrap();
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        assert!(run_lora(&l, &x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_lora_passes_input_through() {
        let d = 4;
        let l =
            LoraAdapter::from_parts(Tensor::<f64>::identity(d), Tensor::identity(d), 1.0).unwrap();
        let mut rng = RngState::new(2, 0);
        let x = Tensor::randn(&[3, d], 1.0, &mut rng);
        assert_eq!(run_lora(&l, &x).data(), x.data());
    }

    #[test]
    fn lora_rejects_wrong_width() {
        let mut rng = RngState::new(1, 0);
        let l = LoraAdapter::<f64>::new(6, 5, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2, 7]));
        assert!(matches!(
            l.contribution(&mut tape, x),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn fresh_recovery_contributes_zero_and_relu_kills_negative() {
        let mut rng = RngState::new(3, 0);
        let r = RecoveryAdapter::<f64>::new(4, 3, 2, &mut rng).unwrap();
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = r.contribution(&mut tape, xv).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));

        // D = -I-ish on a positive input gives x·D < 0 everywhere
        let d = Tensor::full(&[4, 2], -1.0);
        let u = Tensor::full(&[2, 3], 5.0);
        let r = RecoveryAdapter::from_parts(d, u, Sigma::Relu).unwrap();
        let x = Tensor::full(&[2, 4], 0.5);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = r.contribution(&mut tape, xv).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn provenance_round_trips_through_text() {
        for p in [
            Provenance::Scratch,
            Provenance::InheritedFrom("abc123".into()),
        ] {
            assert_eq!(p.to_string().parse::<Provenance>().unwrap(), p);
        }
    }
}
