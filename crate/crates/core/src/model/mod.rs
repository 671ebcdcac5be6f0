//! A small decoder-only transformer.
//!
//! Pre-layernorm blocks with learned positions, causal multi-head attention
//! and a ReLU feed-forward layer. Each of the six projections per block is a
//! [`LinearSlot`] that can be compressed in place; task adapters live in
//! [`AdapterSet`]s attached to the model and are added to the slot outputs
//! they target.

mod checkpoint;
mod slot;

pub use checkpoint::{
    read_file, read_records, write_file, write_records, Record, RecordData, MAGIC, VERSION,
};
pub use slot::{Granularity, LinearSlot, PruneMask, QuantState, SlotKind, SlotPath, StorageMode};

use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterSet};
use crate::error::{Error, Result};
use crate::rng::{streams, RngState};
use crate::tensor::{Element, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: crate::tasks::VOCAB_SIZE,
            max_seq_len: 32,
            activation: Activation::Relu,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Token ids for `batch` sequences of equal length `seq`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(Error::dim(format!(
                "token batch {batch}×{seq} given {} ids",
                ids.len()
            )));
        }
        Ok(Self { batch, seq, ids })
    }

    pub fn from_rows<R: AsRef<[usize]>>(rows: &[R]) -> Result<Self> {
        let seq = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != seq) {
            return Err(Error::dim("token batch rows differ in length"));
        }
        let ids = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().copied())
            .collect();
        Self::new(rows.len(), seq, ids)
    }

    /// Flat row index of the final position of every sequence.
    pub fn last_positions(&self) -> Vec<usize> {
        (0..self.batch)
            .map(|b| b * self.seq + self.seq - 1)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Element> LayerNorm<T> {
    fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::full(&[d], T::one()),
            beta: Tensor::zeros(&[d]),
        }
    }

    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.leaf(&self.gamma);
        let b = tape.leaf(&self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }

    fn cast<U: Element>(&self) -> LayerNorm<U> {
        LayerNorm {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterMode {
    Oracle,
    Learned,
}

/// Partition of a block's FFN neurons into experts, of which `top_k` run
/// per position.
#[derive(Debug, Clone)]
pub struct MoeFfn<T: Element> {
    pub n_experts: usize,
    pub top_k: usize,
    /// Expert of every FFN neuron.
    pub assignment: Vec<usize>,
    pub mode: RouterMode,
    /// `E × d_model` linear scorer, present in learned mode.
    pub router: Option<Tensor<T>>,
}

impl<T: Element> MoeFfn<T> {
    pub fn expert_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_experts];
        for &e in &self.assignment {
            sizes[e] += 1;
        }
        sizes
    }

    /// Per-row expert scores. Oracle mode sums the (already rectified)
    /// activations of each expert's neurons; learned mode applies the
    /// router to the FFN input.
    pub fn scores(&self, act: &[T], input: &[T], rows: usize) -> Vec<f64> {
        let e = self.n_experts;
        let mut scores = vec![0.0; rows * e];
        match (&self.mode, &self.router) {
            (RouterMode::Learned, Some(w)) => {
                let d = w.shape()[1];
                for r in 0..rows {
                    let x = &input[r * d..(r + 1) * d];
                    for j in 0..e {
                        let wj = &w.data()[j * d..(j + 1) * d];
                        scores[r * e + j] =
                            x.iter().zip(wj).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    }
                }
            }
            _ => {
                let n = self.assignment.len();
                for r in 0..rows {
                    for (i, &a) in act[r * n..(r + 1) * n].iter().enumerate() {
                        let a = a.as_f64();
                        if a > 0.0 {
                            scores[r * e + self.assignment[i]] += a;
                        }
                    }
                }
            }
        }
        scores
    }

    /// Selected experts per row: highest scores first, lower index wins ties.
    pub fn select_experts(&self, scores: &[f64], rows: usize) -> Vec<Vec<bool>> {
        let e = self.n_experts;
        (0..rows)
            .map(|r| {
                let s = &scores[r * e..(r + 1) * e];
                let mut order: Vec<usize> = (0..e).collect();
                order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
                let mut chosen = vec![false; e];
                for &j in order.iter().take(self.top_k) {
                    chosen[j] = true;
                }
                chosen
            })
            .collect()
    }

    /// Neuron keep-mask `rows × d_ff` for the given activations.
    pub fn neuron_mask(&self, act: &[T], input: &[T], rows: usize) -> Vec<bool> {
        let scores = self.scores(act, input, rows);
        let chosen = self.select_experts(&scores, rows);
        let mut mask = Vec::with_capacity(rows * self.assignment.len());
        for c in &chosen {
            mask.extend(self.assignment.iter().map(|&e| c[e]));
        }
        mask
    }

    fn cast<U: Element>(&self) -> MoeFfn<U> {
        MoeFfn {
            n_experts: self.n_experts,
            top_k: self.top_k,
            assignment: self.assignment.clone(),
            mode: self.mode,
            router: self.router.as_ref().map(|r| r.cast()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block<T: Element> {
    pub ln1: LayerNorm<T>,
    pub q: LinearSlot<T>,
    pub k: LinearSlot<T>,
    pub v: LinearSlot<T>,
    pub o: LinearSlot<T>,
    pub ln2: LayerNorm<T>,
    pub ffn_in: LinearSlot<T>,
    pub ffn_out: LinearSlot<T>,
    /// Heads still active after structured pruning.
    pub head_keep: Option<Vec<bool>>,
    pub moe: Option<MoeFfn<T>>,
}

impl<T: Element> Block<T> {
    fn init(cfg: &TransformerConfig, rng: &mut RngState) -> Self {
        let d = cfg.d_model;
        let slot = |rows: usize, cols: usize, rng: &mut RngState| {
            LinearSlot::new(
                Tensor::randn(&[rows, cols], INIT_STD, rng),
                Tensor::zeros(&[rows]),
            )
            .expect("consistent shapes")
        };
        let q = slot(d, d, rng);
        let k = slot(d, d, rng);
        let v = slot(d, d, rng);
        let o = slot(d, d, rng);
        let ffn_in = slot(cfg.d_ff, d, rng);
        let ffn_out = slot(d, cfg.d_ff, rng);
        Self {
            ln1: LayerNorm::new(d),
            q,
            k,
            v,
            o,
            ln2: LayerNorm::new(d),
            ffn_in,
            ffn_out,
            head_keep: None,
            moe: None,
        }
    }

    pub fn slot(&self, kind: SlotKind) -> &LinearSlot<T> {
        match kind {
            SlotKind::Query => &self.q,
            SlotKind::Key => &self.k,
            SlotKind::Value => &self.v,
            SlotKind::Output => &self.o,
            SlotKind::FfnIn => &self.ffn_in,
            SlotKind::FfnOut => &self.ffn_out,
        }
    }

    pub fn slot_mut(&mut self, kind: SlotKind) -> &mut LinearSlot<T> {
        match kind {
            SlotKind::Query => &mut self.q,
            SlotKind::Key => &mut self.k,
            SlotKind::Value => &mut self.v,
            SlotKind::Output => &mut self.o,
            SlotKind::FfnIn => &mut self.ffn_in,
            SlotKind::FfnOut => &mut self.ffn_out,
        }
    }

    /// Current FFN width (shrinks under structured pruning).
    pub fn d_ff(&self) -> usize {
        self.ffn_in.d_out()
    }

    fn cast<U: Element>(&self) -> Block<U> {
        Block {
            ln1: self.ln1.cast(),
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
            o: self.o.cast(),
            ln2: self.ln2.cast(),
            ffn_in: self.ffn_in.cast(),
            ffn_out: self.ffn_out.cast(),
            head_keep: self.head_keep.clone(),
            moe: self.moe.as_ref().map(|m| m.cast()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransformerModel<T: Element> {
    pub config: TransformerConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_f: LayerNorm<T>,
    /// Output projection `vocab × d_model`, no bias.
    pub head: Tensor<T>,
    adapter_sets: Vec<AdapterSet<T>>,
}

impl<T: Element> TransformerModel<T> {
    /// Fresh backbone: Gaussian weights (std 0.02), zero biases, unit norms.
    /// All backbone tensors start trainable.
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(seed, streams::BACKBONE_INIT);
        let d = config.d_model;
        let tok_emb = Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng);
        let pos_emb = Tensor::randn(&[config.max_seq_len, d], INIT_STD, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block::init(&config, &mut rng))
            .collect();
        let head = Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng);
        let mut model = Self {
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNorm::new(d),
            head,
            adapter_sets: Vec::new(),
            config,
        };
        model.set_backbone_trainable(true)?;
        Ok(model)
    }

    pub(crate) fn from_parts(
        config: TransformerConfig,
        tok_emb: Tensor<T>,
        pos_emb: Tensor<T>,
        blocks: Vec<Block<T>>,
        ln_f: LayerNorm<T>,
        head: Tensor<T>,
    ) -> Self {
        Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
            adapter_sets: Vec::new(),
        }
    }

    pub fn slot(&self, path: &SlotPath) -> Result<&LinearSlot<T>> {
        self.blocks
            .get(path.layer)
            .map(|b| b.slot(path.kind))
            .ok_or_else(|| Error::config(format!("no slot `{path}`")))
    }

    pub fn slot_mut(&mut self, path: &SlotPath) -> Result<&mut LinearSlot<T>> {
        self.blocks
            .get_mut(path.layer)
            .map(|b| b.slot_mut(path.kind))
            .ok_or_else(|| Error::config(format!("no slot `{path}`")))
    }

    pub fn slot_paths(&self) -> Vec<SlotPath> {
        SlotPath::grid(self.blocks.len(), &SlotKind::ALL)
    }

    // ----- adapters ------------------------------------------------------

    pub fn adapter_sets(&self) -> &[AdapterSet<T>] {
        &self.adapter_sets
    }

    pub fn adapter_set(&self, task: &str) -> Option<&AdapterSet<T>> {
        self.adapter_sets.iter().find(|s| s.task == task)
    }

    pub fn adapter_set_mut(&mut self, task: &str) -> Option<&mut AdapterSet<T>> {
        self.adapter_sets.iter_mut().find(|s| s.task == task)
    }

    fn check_fit(&self, path: &SlotPath, d_in: usize, d_out: usize) -> Result<()> {
        let slot = self.slot(path)?;
        if slot.d_in() != d_in || slot.d_out() != d_out {
            return Err(Error::config(format!(
                "adapter {d_in}→{d_out} does not fit slot `{path}` ({}→{})",
                slot.d_in(),
                slot.d_out()
            )));
        }
        Ok(())
    }

    /// Adds one adapter to the set of `task` (creating the set if needed).
    pub fn attach_adapter(
        &mut self,
        path: SlotPath,
        task: &str,
        adapter: Adapter<T>,
    ) -> Result<()> {
        self.check_fit(&path, adapter.d_in(), adapter.d_out())?;
        if self.adapter_set(task).is_none() {
            self.adapter_sets.push(AdapterSet::new(task));
        }
        let set = self.adapter_set_mut(task).expect("just inserted");
        let taken = match &adapter {
            Adapter::Lora(_) => set.lora.contains_key(&path),
            Adapter::Recovery(_) => set.recovery.contains_key(&path),
        };
        if taken {
            return Err(Error::config(format!(
                "task `{task}` already has an adapter of this kind on `{path}`"
            )));
        }
        match adapter {
            Adapter::Lora(l) => {
                set.lora.insert(path, l);
            }
            Adapter::Recovery(r) => {
                set.recovery.insert(path, r);
            }
        }
        Ok(())
    }

    /// Attaches a whole adapter set. Its task must not already be attached.
    pub fn attach_set(&mut self, set: AdapterSet<T>) -> Result<()> {
        if self.adapter_set(&set.task).is_some() {
            return Err(Error::config(format!(
                "task `{}` is already attached",
                set.task
            )));
        }
        for (p, l) in &set.lora {
            self.check_fit(p, l.d_in(), l.d_out())?;
        }
        for (p, r) in &set.recovery {
            self.check_fit(p, r.d_in(), r.d_out())?;
        }
        self.adapter_sets.push(set);
        Ok(())
    }

    pub fn detach_set(&mut self, task: &str) -> Option<AdapterSet<T>> {
        let i = self.adapter_sets.iter().position(|s| s.task == task)?;
        Some(self.adapter_sets.remove(i))
    }

    pub fn detach_all(&mut self) -> Vec<AdapterSet<T>> {
        std::mem::take(&mut self.adapter_sets)
    }

    // ----- parameters ----------------------------------------------------

    /// Named backbone tensors in a fixed order. Router weights are part of
    /// the backbone but never trainable.
    pub fn backbone_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("layers.{i}.ln1.gamma"), &b.ln1.gamma));
            out.push((format!("layers.{i}.ln1.beta"), &b.ln1.beta));
            for kind in SlotKind::ALL {
                let s = b.slot(kind);
                let p = SlotPath::new(i, kind);
                out.push((format!("{p}.weight"), &s.weight));
                out.push((format!("{p}.bias"), &s.bias));
                if kind == SlotKind::Output {
                    out.push((format!("layers.{i}.ln2.gamma"), &b.ln2.gamma));
                    out.push((format!("layers.{i}.ln2.beta"), &b.ln2.beta));
                }
            }
            if let Some(r) = b.moe.as_ref().and_then(|m| m.router.as_ref()) {
                out.push((format!("layers.{i}.router"), r));
            }
        }
        out.push(("ln_f.gamma".to_string(), &self.ln_f.gamma));
        out.push(("ln_f.beta".to_string(), &self.ln_f.beta));
        out.push(("head".to_string(), &self.head));
        out
    }

    fn backbone_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        backbone_refs(
            &mut self.tok_emb,
            &mut self.pos_emb,
            &mut self.blocks,
            &mut self.ln_f,
            &mut self.head,
        )
    }

    /// Freezes or unfreezes every backbone tensor. Quantized codes are
    /// frozen by construction, so unfreezing a quantized model is refused.
    pub fn set_backbone_trainable(&mut self, flag: bool) -> Result<()> {
        if flag
            && self
                .blocks
                .iter()
                .any(|b| SlotKind::ALL.iter().any(|&k| b.slot(k).quant.is_some()))
        {
            return Err(Error::Contract(
                "quantized slots cannot be made trainable".into(),
            ));
        }
        for t in self.backbone_tensors_mut() {
            t.set_requires_grad(flag);
        }
        Ok(())
    }

    pub fn freeze_backbone(&mut self) {
        self.set_backbone_trainable(false)
            .expect("freezing never fails");
    }

    /// Stored parameter count. Masked weights still count; see
    /// [`TransformerModel::effective_param_count`].
    pub fn param_count(&self, trainable_only: bool) -> usize {
        let backbone: usize = self
            .backbone_tensors()
            .into_iter()
            .filter(|(_, t)| !trainable_only || t.requires_grad())
            .map(|(_, t)| t.len())
            .sum();
        let adapters: usize = self
            .adapter_sets
            .iter()
            .flat_map(adapter_tensors)
            .filter(|t| !trainable_only || t.requires_grad())
            .map(|t| t.len())
            .sum();
        backbone + adapters
    }

    /// Backbone parameters excluding masked slot coordinates.
    pub fn effective_param_count(&self) -> usize {
        let mut n = 0;
        for (name, t) in self.backbone_tensors() {
            n += t.len();
            if let Some(path) = name.strip_suffix(".weight") {
                let slot = self
                    .slot(&path.parse().expect("own names parse"))
                    .expect("exists");
                n -= t.len() - slot.kept_weights();
            }
        }
        n
    }

    /// Every tensor flagged trainable: backbone first, then adapters in
    /// attachment order.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let Self {
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
            adapter_sets,
            ..
        } = self;
        let mut out: Vec<&mut Tensor<T>> = backbone_refs(tok_emb, pos_emb, blocks, ln_f, head)
            .into_iter()
            .filter(|t| t.requires_grad())
            .collect();
        for set in adapter_sets {
            for l in set.lora.values_mut() {
                out.extend(
                    [&mut l.a, &mut l.b]
                        .into_iter()
                        .filter(|t| t.requires_grad()),
                );
            }
            for r in set.recovery.values_mut() {
                out.extend(
                    [&mut r.d, &mut r.u]
                        .into_iter()
                        .filter(|t| t.requires_grad()),
                );
            }
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for t in self.trainable_params_mut() {
            t.zero_grad();
        }
    }

    // ----- forward -------------------------------------------------------

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.seq > self.config.max_seq_len {
            return Err(Error::dim(format!(
                "sequence length {} exceeds maximum {}",
                batch.seq, self.config.max_seq_len
            )));
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Index(format!(
                "token id {id} ≥ vocabulary size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Output of one slot: frozen base plus every attached adapter.
    pub fn apply_slot(&self, tape: &mut Tape<T>, x: Var, path: SlotPath) -> Result<Var> {
        let slot = self.blocks[path.layer].slot(path.kind);
        let mut y = slot.base_forward(tape, x)?;
        for set in &self.adapter_sets {
            if let Some(l) = set.lora.get(&path) {
                let c = l.contribution(tape, x)?;
                y = tape.add(y, c)?;
            }
            if let Some(r) = set.recovery.get(&path) {
                let c = r.contribution(tape, x)?;
                y = tape.add(y, c)?;
            }
        }
        Ok(y)
    }

    /// Final-layernorm hidden states, `[batch·seq × d_model]`.
    pub fn hidden_states(&self, tape: &mut Tape<T>, batch: &TokenBatch) -> Result<Var> {
        self.run(tape, batch, None)
    }

    /// Per-block FFN inputs (after the second layernorm) and rectified FFN
    /// activations before expert selection.
    pub fn ffn_traces(&self, batch: &TokenBatch) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        let mut tape = Tape::new();
        let mut trace = Vec::new();
        self.run(&mut tape, batch, Some(&mut trace))?;
        Ok(trace
            .into_iter()
            .map(|(h, f)| (tape.to_tensor(h), tape.to_tensor(f)))
            .collect())
    }

    fn run(
        &self,
        tape: &mut Tape<T>,
        batch: &TokenBatch,
        mut trace: Option<&mut Vec<(Var, Var)>>,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let tok = tape.leaf(&self.tok_emb);
        let mut x = tape.embedding(tok, &batch.ids)?;
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
        let pos = tape.leaf(&self.pos_emb);
        let p = tape.embedding(pos, &positions)?;
        x = tape.add(x, p)?;
        for (i, b) in self.blocks.iter().enumerate() {
            let h = b.ln1.forward(tape, x)?;
            let q = self.apply_slot(tape, h, SlotPath::new(i, SlotKind::Query))?;
            let k = self.apply_slot(tape, h, SlotPath::new(i, SlotKind::Key))?;
            let v = self.apply_slot(tape, h, SlotPath::new(i, SlotKind::Value))?;
            let a = tape.causal_attention(
                q,
                k,
                v,
                batch.batch,
                batch.seq,
                cfg.n_heads,
                b.head_keep.clone(),
            )?;
            let o = self.apply_slot(tape, a, SlotPath::new(i, SlotKind::Output))?;
            x = tape.add(x, o)?;

            let h = b.ln2.forward(tape, x)?;
            let f = self.apply_slot(tape, h, SlotPath::new(i, SlotKind::FfnIn))?;
            let mut f = tape.relu(f);
            if let Some(t) = trace.as_deref_mut() {
                t.push((h, f));
            }
            if let Some(moe) = &b.moe {
                let rows = batch.batch * batch.seq;
                let mask = moe.neuron_mask(tape.value(f), tape.value(h), rows);
                f = tape.select(f, mask)?;
            }
            let f = self.apply_slot(tape, f, SlotPath::new(i, SlotKind::FfnOut))?;
            x = tape.add(x, f)?;
        }
        self.ln_f.forward(tape, x)
    }

    /// Logits for the given hidden rows.
    pub fn project(&self, tape: &mut Tape<T>, hidden: Var) -> Result<Var> {
        let w = tape.leaf(&self.head);
        tape.linear(hidden, w, None)
    }

    /// Logits at every position, `[batch·seq × vocab]`.
    pub fn logits(&self, tape: &mut Tape<T>, batch: &TokenBatch) -> Result<Var> {
        let h = self.hidden_states(tape, batch)?;
        self.project(tape, h)
    }

    /// Logits at the final position of each sequence, `[batch × vocab]`.
    pub fn last_logits(&self, tape: &mut Tape<T>, batch: &TokenBatch) -> Result<Var> {
        let h = self.hidden_states(tape, batch)?;
        let last = tape.gather_rows(h, &batch.last_positions())?;
        self.project(tape, last)
    }

    /// Full forward pass, `[batch × seq × vocab]`.
    pub fn forward(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let y = self.logits(&mut tape, batch)?;
        tape.to_tensor(y)
            .reshape(vec![batch.batch, batch.seq, self.config.vocab_size])
    }

    /// Argmax token at the final position of each sequence.
    pub fn predict_last(&self, batch: &TokenBatch) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let y = self.last_logits(&mut tape, batch)?;
        let v = self.config.vocab_size;
        Ok(tape
            .value(y)
            .chunks_exact(v)
            .map(|row| {
                let mut best = 0;
                for j in 1..v {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    pub fn cast<U: Element>(&self) -> TransformerModel<U> {
        TransformerModel {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
            ln_f: self.ln_f.cast(),
            head: self.head.cast(),
            adapter_sets: self.adapter_sets.iter().map(|s| s.cast()).collect(),
        }
    }
}

fn backbone_refs<'a, T: Element>(
    tok_emb: &'a mut Tensor<T>,
    pos_emb: &'a mut Tensor<T>,
    blocks: &'a mut [Block<T>],
    ln_f: &'a mut LayerNorm<T>,
    head: &'a mut Tensor<T>,
) -> Vec<&'a mut Tensor<T>> {
    let mut out = vec![tok_emb, pos_emb];
    for b in blocks {
        let Block {
            ln1,
            q,
            k,
            v,
            o,
            ln2,
            ffn_in,
            ffn_out,
            ..
        } = b;
        out.extend([&mut ln1.gamma, &mut ln1.beta]);
        for s in [q, k, v, o] {
            out.extend([&mut s.weight, &mut s.bias]);
        }
        out.extend([&mut ln2.gamma, &mut ln2.beta]);
        for s in [ffn_in, ffn_out] {
            out.extend([&mut s.weight, &mut s.bias]);
        }
    }
    out.extend([&mut ln_f.gamma, &mut ln_f.beta, head]);
    out
}

fn adapter_tensors<T: Element>(set: &AdapterSet<T>) -> Vec<&Tensor<T>> {
    let mut out = Vec::new();
    for l in set.lora.values() {
        out.extend([&l.a, &l.b]);
    }
    for r in set.recovery.values() {
        out.extend([&r.d, &r.u]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{LoraAdapter, RecoveryAdapter};

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 4,
            d_ff: 32,
            vocab_size: 11,
            max_seq_len: 8,
            activation: Activation::Relu,
        }
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = TransformerConfig {
            n_heads: 5,
            ..tiny()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn identical_rows_give_identical_logits() {
        let m = TransformerModel::<f64>::new(tiny(), 1).unwrap();
        let batch = TokenBatch::from_rows(&[vec![1, 2, 3], vec![1, 2, 3]]).unwrap();
        let y = m.forward(&batch).unwrap();
        let half = y.len() / 2;
        assert_eq!(&y.data()[..half], &y.data()[half..]);
    }

    #[test]
    fn out_of_range_token_is_an_index_error() {
        let m = TransformerModel::<f32>::new(tiny(), 1).unwrap();
        let batch = TokenBatch::from_rows(&[vec![1, 11]]).unwrap();
        assert!(matches!(m.forward(&batch), Err(Error::Index(_))));
        let long = TokenBatch::new(1, 9, vec![0; 9]).unwrap();
        assert!(m.forward(&long).is_err());
    }

    #[test]
    fn attach_counts_and_rejects() {
        let mut m = TransformerModel::<f32>::new(tiny(), 2).unwrap();
        m.freeze_backbone();
        assert_eq!(m.param_count(true), 0);
        let before = m.param_count(false);
        let mut rng = RngState::new(0, 0);
        let l = LoraAdapter::new(16, 16, 8, &mut rng).unwrap();
        m.attach_adapter(SlotPath::new(0, SlotKind::Query), "t", Adapter::Lora(l))
            .unwrap();
        assert_eq!(m.param_count(false) - before, 8 * (16 + 16));
        assert_eq!(m.param_count(true), 8 * (16 + 16));

        let l = LoraAdapter::new(16, 16, 8, &mut rng).unwrap();
        let err = m
            .attach_adapter(SlotPath::new(5, SlotKind::Query), "t", Adapter::Lora(l))
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let r = RecoveryAdapter::new(16, 16, 4, &mut rng).unwrap();
        let err = m
            .attach_adapter(SlotPath::new(0, SlotKind::FfnIn), "t", Adapter::Recovery(r))
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn moe_selection_prefers_lower_index_on_ties() {
        let moe = MoeFfn::<f64> {
            n_experts: 3,
            top_k: 1,
            assignment: vec![0, 1, 2],
            mode: RouterMode::Oracle,
            router: None,
        };
        let chosen = moe.select_experts(&[1.0, 2.0, 2.0], 1);
        assert_eq!(chosen[0], vec![false, true, false]);
    }
}
