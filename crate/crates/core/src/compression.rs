//! Task-agnostic backbone compression: symmetric per-row quantization,
//! global magnitude pruning, structured FFN/head pruning and MoEfication,
//! applied in place to a model's slots.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Granularity, MoeFfn, PruneMask, QuantState, RouterMode, SlotKind, SlotPath, TokenBatch,
    TransformerModel,
};
use crate::rng::{streams, RngState};
use crate::tensor::{adamw_step, AdamState, AdamW, Element, Tape, Tensor};

/// Tolerance applied before flooring keep counts.
const KEEP_EPS: f64 = 1e-9;
const KMEANS_MAX_ITERS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum CompressionStep {
    Quantize {
        bits: u8,
    },
    PruneUnstructured {
        sparsity: f64,
    },
    PruneStructured {
        ffn_keep_fraction: f64,
        heads_keep_fraction: f64,
    },
    Moefy {
        n_experts: usize,
        top_k: usize,
        #[serde(default = "default_router")]
        router: RouterMode,
    },
}

fn default_router() -> RouterMode {
    RouterMode::Oracle
}

impl fmt::Display for CompressionStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompressionStep::Quantize { bits } => write!(f, "quantize({bits})"),
            CompressionStep::PruneUnstructured { sparsity } => {
                write!(f, "prune-unstructured({sparsity})")
            }
            CompressionStep::PruneStructured {
                ffn_keep_fraction,
                heads_keep_fraction,
            } => write!(
                f,
                "prune-structured(ffn={ffn_keep_fraction},heads={heads_keep_fraction})"
            ),
            CompressionStep::Moefy {
                n_experts, top_k, ..
            } => write!(f, "moefy(E={n_experts},k={top_k})"),
        }
    }
}

/// Ordered compression pipeline.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CompressionSpec {
    #[serde(default)]
    pub steps: Vec<CompressionStep>,
    /// Seeds k-means initialization and router fitting.
    #[serde(default)]
    pub seed: u64,
}

impl CompressionSpec {
    pub fn new(steps: Vec<CompressionStep>) -> Self {
        Self { steps, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let mut quantized_at = None;
        for (i, step) in self.steps.iter().enumerate() {
            let bad = |m: &str| Err(Error::config(format!("compression step {i} ({step}): {m}")));
            match *step {
                CompressionStep::Quantize { bits } => {
                    if bits != 8 && bits != 4 {
                        return bad("bits must be 8 or 4");
                    }
                    if quantized_at.is_some() {
                        return bad("model is already quantized");
                    }
                    quantized_at = Some(i);
                }
                CompressionStep::PruneUnstructured { sparsity } => {
                    if !(sparsity > 0.0 && sparsity < 1.0) {
                        return bad("sparsity must lie in (0, 1)");
                    }
                }
                CompressionStep::PruneStructured {
                    ffn_keep_fraction,
                    heads_keep_fraction,
                } => {
                    for f in [ffn_keep_fraction, heads_keep_fraction] {
                        if !(f > 0.0 && f <= 1.0) {
                            return bad("keep fractions must lie in (0, 1]");
                        }
                    }
                }
                CompressionStep::Moefy {
                    n_experts, top_k, ..
                } => {
                    if n_experts == 0 || top_k == 0 || top_k > n_experts {
                        return bad("need 1 ≤ top_k ≤ n_experts");
                    }
                    if quantized_at.is_some() {
                        return bad("MoEfication must precede quantization");
                    }
                }
            }
        }
        Ok(())
    }
}

/// One applied step's accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: String,
    pub params_before: usize,
    pub params_after: usize,
    pub bytes_before: usize,
    pub bytes_after: usize,
    pub mac_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CompressionReport {
    pub steps: Vec<StepReport>,
}

impl CompressionReport {
    /// Fraction of the original bit-weighted MACs retained.
    pub fn mac_fraction(&self) -> f64 {
        self.steps.iter().map(|s| s.mac_fraction).product()
    }

    pub fn ideal_speedup(&self) -> f64 {
        1.0 / self.mac_fraction()
    }

    pub fn size_ratio(&self) -> f64 {
        match (self.steps.first(), self.steps.last()) {
            (Some(a), Some(b)) => b.bytes_after as f64 / a.bytes_before as f64,
            _ => 1.0,
        }
    }
}

// ----- accounting --------------------------------------------------------

/// Bytes per dense float in the storage accounting (16-bit equivalent).
pub const DENSE_BYTES: f64 = 2.0;

/// Ideal storage of a backbone: dense floats at 16 bits, quantized slot
/// weights at their bit width plus one 16-bit scale per row, masked
/// coordinates free.
pub fn storage_bytes<T: Element>(model: &TransformerModel<T>) -> usize {
    let mut bits = 0.0f64;
    for (name, t) in model.backbone_tensors() {
        let slot = name
            .strip_suffix(".weight")
            .and_then(|p| p.parse::<SlotPath>().ok())
            .map(|p| model.slot(&p).expect("own slot"));
        match slot {
            Some(s) => {
                let kept = s.kept_weights() as f64;
                match s.quant() {
                    Some(q) => bits += kept * q.bits as f64 + s.d_out() as f64 * 16.0,
                    None => bits += kept * 16.0,
                }
            }
            None => bits += t.len() as f64 * 16.0,
        }
    }
    (bits / 8.0).ceil() as usize
}

/// Bit-weighted multiply-accumulates per token over slot projections and
/// the output head, relative to 16-bit dense arithmetic.
pub fn effective_macs<T: Element>(model: &TransformerModel<T>) -> f64 {
    let mut macs = model.head.len() as f64;
    for (i, b) in model.blocks.iter().enumerate() {
        for kind in SlotKind::ALL {
            let s = model.slot(&SlotPath::new(i, kind)).expect("exists");
            let mut m = s.kept_weights() as f64;
            if let Some(q) = s.quant() {
                m *= q.bits as f64 / 16.0;
            }
            if let (Some(moe), false) = (&b.moe, kind.is_attention()) {
                m *= moe.top_k as f64 / moe.n_experts as f64;
            }
            macs += m;
        }
    }
    macs
}

// ----- quantization ------------------------------------------------------

/// Symmetric per-row quantization with ties rounded to even.
pub fn quantize_rows(w: &[f64], d_out: usize, d_in: usize, bits: u8) -> QuantState {
    let qmax = QuantState::qmax(bits) as f64;
    let mut codes = Vec::with_capacity(w.len());
    let mut scales = Vec::with_capacity(d_out);
    for r in 0..d_out {
        let row = &w[r * d_in..(r + 1) * d_in];
        let max = row.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let scale = (max / qmax) as f32;
        scales.push(scale);
        for &x in row {
            let c = if scale == 0.0 {
                0.0
            } else {
                (x / scale as f64).round_ties_even().clamp(-qmax, qmax)
            };
            codes.push(c as i8);
        }
    }
    QuantState {
        bits,
        codes,
        scales,
    }
}

/// Replaces a slot's weight by its quantized approximation.
pub fn quantize_slot<T: Element>(
    model: &mut TransformerModel<T>,
    path: &SlotPath,
    bits: u8,
) -> Result<()> {
    if bits != 8 && bits != 4 {
        return Err(Error::config(format!("unsupported bit width {bits}")));
    }
    let slot = model.slot_mut(path)?;
    if slot.quant.is_some() {
        return Err(Error::config(format!("slot `{path}` is already quantized")));
    }
    let (d_out, d_in) = (slot.d_out(), slot.d_in());
    let w: Vec<f64> = slot.weight.data().iter().map(|x| x.as_f64()).collect();
    let q = quantize_rows(&w, d_out, d_in, bits);
    let deq: Vec<T> = q.dequantize(d_out, d_in);
    slot.weight.data_mut().copy_from_slice(&deq);
    slot.quant = Some(q);
    slot.weight.set_requires_grad(false);
    if let Some(m) = slot.mask.take() {
        slot.apply_mask(m)?;
    }
    Ok(())
}

pub fn quantize<T: Element>(model: &mut TransformerModel<T>, bits: u8) -> Result<()> {
    for path in model.slot_paths() {
        quantize_slot(model, &path, bits)?;
    }
    Ok(())
}

// ----- pruning -----------------------------------------------------------

/// Masks exactly `⌊sparsity·N⌋` of the `N` slot weights, smallest
/// magnitude first, ties broken by position.
pub fn prune_unstructured<T: Element>(
    model: &mut TransformerModel<T>,
    sparsity: f64,
) -> Result<()> {
    if !(sparsity > 0.0 && sparsity < 1.0) {
        return Err(Error::config("sparsity must lie in (0, 1)"));
    }
    let paths = model.slot_paths();
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (si, p) in paths.iter().enumerate() {
        let w = &model.slot(p)?.weight;
        all.extend(
            w.data()
                .iter()
                .enumerate()
                .map(|(j, x)| (x.as_f64().abs(), si, j)),
        );
    }
    let n_mask = (sparsity * all.len() as f64).floor() as usize;
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut keep: Vec<Vec<bool>> = paths
        .iter()
        .map(|p| vec![true; model.slot(p).expect("exists").weight.len()])
        .collect();
    for &(_, si, j) in &all[..n_mask] {
        keep[si][j] = false;
    }
    for (p, k) in paths.iter().zip(keep) {
        model
            .slot_mut(p)?
            .apply_mask(PruneMask::new(k, Granularity::Element, sparsity))?;
    }
    Ok(())
}

fn keep_count(fraction: f64, n: usize, what: &str) -> Result<usize> {
    let k = (fraction * n as f64 + KEEP_EPS).floor() as usize;
    if k == 0 {
        return Err(Error::config(format!(
            "keeping {fraction} of {n} {what} leaves none"
        )));
    }
    Ok(k.min(n))
}

/// Indices of the `k` largest scores, lower index first on ties, returned
/// in ascending index order.
fn top_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

/// FFN neuron importance `‖W_in[i,:]‖₂ · ‖W_out[:,i]‖₂`.
pub fn ffn_importance<T: Element>(model: &TransformerModel<T>, layer: usize) -> Vec<f64> {
    let b = &model.blocks[layer];
    let (n, d) = (b.ffn_in.d_out(), b.ffn_in.d_in());
    let win = b.ffn_in.weight.data();
    let wout = b.ffn_out.weight.data();
    (0..n)
        .map(|i| {
            let r: f64 = win[i * d..(i + 1) * d]
                .iter()
                .map(|x| x.as_f64().powi(2))
                .sum();
            let c: f64 = (0..b.ffn_out.d_out())
                .map(|o| wout[o * n + i].as_f64().powi(2))
                .sum();
            r.sqrt() * c.sqrt()
        })
        .collect()
}

/// Head importance: Frobenius norm of the head's rows of Q, K, V and
/// columns of O.
pub fn head_importance<T: Element>(model: &TransformerModel<T>, layer: usize) -> Vec<f64> {
    let b = &model.blocks[layer];
    let h = model.config.n_heads;
    let d = model.config.d_model;
    let dh = d / h;
    (0..h)
        .map(|head| {
            let mut s = 0.0;
            for slot in [&b.q, &b.k, &b.v] {
                let w = slot.weight.data();
                for r in head * dh..(head + 1) * dh {
                    s += w[r * d..(r + 1) * d]
                        .iter()
                        .map(|x| x.as_f64().powi(2))
                        .sum::<f64>();
                }
            }
            let w = b.o.weight.data();
            for r in 0..d {
                s += w[r * d + head * dh..r * d + (head + 1) * dh]
                    .iter()
                    .map(|x| x.as_f64().powi(2))
                    .sum::<f64>();
            }
            s.sqrt()
        })
        .collect()
}

/// Removes the least important FFN neurons and masks the least important
/// attention heads of every layer. `d_model` is untouched.
pub fn prune_structured<T: Element>(
    model: &mut TransformerModel<T>,
    ffn_keep_fraction: f64,
    heads_keep_fraction: f64,
) -> Result<()> {
    for f in [ffn_keep_fraction, heads_keep_fraction] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::config("keep fractions must lie in (0, 1]"));
        }
    }
    for layer in 0..model.blocks.len() {
        let n = model.blocks[layer].d_ff();
        let keep = keep_count(ffn_keep_fraction, n, "FFN neurons")?;
        if keep < n {
            if model.blocks[layer].moe.is_some() {
                return Err(Error::config("structured pruning must precede MoEfication"));
            }
            let kept = top_indices(&ffn_importance(model, layer), keep);
            remove_neurons(model, layer, &kept)?;
        }
        let h = model.config.n_heads;
        let keep = keep_count(heads_keep_fraction, h, "attention heads")?;
        if keep < h {
            let kept = top_indices(&head_importance(model, layer), keep);
            mask_heads(model, layer, &kept)?;
        }
    }
    Ok(())
}

fn remove_neurons<T: Element>(
    model: &mut TransformerModel<T>,
    layer: usize,
    kept: &[usize],
) -> Result<()> {
    let b = &mut model.blocks[layer];
    let (n, d) = (b.ffn_in.d_out(), b.ffn_in.d_in());
    let k = kept.len();

    let fi = &mut b.ffn_in;
    let rows = |v: &[T]| -> Vec<T> {
        kept.iter()
            .flat_map(|&i| v[i * d..(i + 1) * d].iter().copied())
            .collect()
    };
    let w = Tensor::new(vec![k, d], rows(fi.weight.data()))?;
    let bias = Tensor::new(vec![k], kept.iter().map(|&i| fi.bias.data()[i]).collect())?;
    let grad = (fi.weight.requires_grad(), fi.bias.requires_grad());
    fi.weight = w;
    fi.bias = bias;
    fi.weight.set_requires_grad(grad.0);
    fi.bias.set_requires_grad(grad.1);
    if let Some(q) = &mut fi.quant {
        q.codes = kept
            .iter()
            .flat_map(|&i| q.codes[i * d..(i + 1) * d].iter().copied())
            .collect();
        q.scales = kept.iter().map(|&i| q.scales[i]).collect();
    }
    if let Some(m) = &fi.mask {
        let keep = kept
            .iter()
            .flat_map(|&i| m.keep()[i * d..(i + 1) * d].iter().copied())
            .collect();
        fi.mask = Some(PruneMask::new(keep, m.granularity(), m.target()));
    }

    let fo = &mut b.ffn_out;
    let cols = |v: &[T]| -> Vec<T> {
        (0..d)
            .flat_map(|o| kept.iter().map(move |&i| v[o * n + i]))
            .collect()
    };
    let g = fo.weight.requires_grad();
    fo.weight = Tensor::new(vec![d, k], cols(fo.weight.data()))?;
    fo.weight.set_requires_grad(g);
    if let Some(q) = &mut fo.quant {
        q.codes = (0..d)
            .flat_map(|o| kept.iter().map(|&i| q.codes[o * n + i]).collect::<Vec<_>>())
            .collect();
    }
    if let Some(m) = &fo.mask {
        let keep = (0..d)
            .flat_map(|o| {
                kept.iter()
                    .map(|&i| m.keep()[o * n + i])
                    .collect::<Vec<_>>()
            })
            .collect();
        fo.mask = Some(PruneMask::new(keep, m.granularity(), m.target()));
    }
    Ok(())
}

fn mask_heads<T: Element>(
    model: &mut TransformerModel<T>,
    layer: usize,
    kept: &[usize],
) -> Result<()> {
    let h = model.config.n_heads;
    let d = model.config.d_model;
    let dh = d / h;
    let mut alive = vec![false; h];
    for &k in kept {
        alive[k] = true;
    }
    let target = 1.0 - kept.len() as f64 / h as f64;
    let b = &mut model.blocks[layer];
    let row_mask: Vec<bool> = (0..d)
        .flat_map(|r| std::iter::repeat_n(alive[r / dh], d))
        .collect();
    for slot in [&mut b.q, &mut b.k, &mut b.v] {
        slot.apply_mask(PruneMask::new(
            row_mask.clone(),
            Granularity::AttentionHead,
            target,
        ))?;
    }
    let col_mask: Vec<bool> = (0..d).flat_map(|_| (0..d).map(|c| alive[c / dh])).collect();
    b.o.apply_mask(PruneMask::new(col_mask, Granularity::AttentionHead, target))?;
    b.head_keep = Some(match &b.head_keep {
        Some(old) => old.iter().zip(&alive).map(|(&a, &b)| a && b).collect(),
        None => alive,
    });
    Ok(())
}

// ----- MoEfication -------------------------------------------------------

fn normalized_rows(w: &[f64], n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let r = &w[i * d..(i + 1) * d];
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                r.iter().map(|x| x / norm).collect()
            } else {
                r.to_vec()
            }
        })
        .collect()
}

/// Balanced k-means under cosine similarity: every cluster receives
/// exactly `n / e` points. Assignment is greedy over all (point, cluster)
/// pairs by descending similarity with index tie-breaks.
pub fn balanced_kmeans(points: &[Vec<f64>], e: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.len();
    if e == 0 || !n.is_multiple_of(e) {
        return Err(Error::config(format!(
            "{n} neurons cannot be split into {e} equal experts"
        )));
    }
    let cap = n / e;
    let mut rng = RngState::new(seed, streams::KMEANS);
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let mut centroids: Vec<Vec<f64>> = idx[..e].iter().map(|&i| points[i].clone()).collect();
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * e);
        for (i, p) in points.iter().enumerate() {
            for (j, c) in centroids.iter().enumerate() {
                pairs.push((p.iter().zip(c).map(|(a, b)| a * b).sum(), i, j));
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let mut next = vec![usize::MAX; n];
        let mut fill = vec![0usize; e];
        for (_, i, j) in pairs {
            if next[i] == usize::MAX && fill[j] < cap {
                next[i] = j;
                fill[j] += 1;
            }
        }
        if fill.iter().any(|&f| f != cap) {
            return Err(Error::Internal(
                "balanced assignment left an expert unfilled".into(),
            ));
        }
        let converged = next == assignment;
        assignment = next;
        if converged {
            break;
        }
        for (j, c) in centroids.iter_mut().enumerate() {
            let mut sum = vec![0.0; c.len()];
            for (i, p) in points.iter().enumerate() {
                if assignment[i] == j {
                    sum.iter_mut().zip(p).for_each(|(s, x)| *s += x);
                }
            }
            let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                *c = sum.into_iter().map(|x| x / norm).collect();
            }
        }
    }
    Ok(assignment)
}

/// Partitions each block's FFN neurons into `n_experts` experts and
/// installs top-k routing.
pub fn moefy<T: Element>(
    model: &mut TransformerModel<T>,
    n_experts: usize,
    top_k: usize,
    router: RouterMode,
    seed: u64,
) -> Result<()> {
    if n_experts == 0 || top_k == 0 || top_k > n_experts {
        return Err(Error::config("need 1 ≤ top_k ≤ n_experts"));
    }
    for layer in 0..model.blocks.len() {
        let b = &model.blocks[layer];
        if b.ffn_in.quant().is_some() || b.ffn_out.quant().is_some() {
            return Err(Error::config("MoEfication must precede quantization"));
        }
        if b.moe.is_some() {
            return Err(Error::config("block is already MoEfied"));
        }
        let (n, d) = (b.ffn_in.d_out(), b.ffn_in.d_in());
        let w: Vec<f64> = b.ffn_in.weight.data().iter().map(|x| x.as_f64()).collect();
        let assignment = balanced_kmeans(
            &normalized_rows(&w, n, d),
            n_experts,
            seed.wrapping_add(layer as u64),
        )?;
        model.blocks[layer].moe = Some(MoeFfn {
            n_experts,
            top_k,
            assignment,
            mode: RouterMode::Oracle,
            router: None,
        });
    }
    if router == RouterMode::Learned {
        fit_routers(model, seed)?;
    }
    Ok(())
}

const ROUTER_SAMPLES: usize = 64;
const ROUTER_STEPS: usize = 300;

/// Fits a linear expert scorer per block on oracle top-1 labels gathered
/// from random token sequences, then switches the blocks to learned mode.
pub fn fit_routers<T: Element>(model: &mut TransformerModel<T>, seed: u64) -> Result<()> {
    let mut rng = RngState::new(seed, streams::ROUTER);
    let seq = model.config.max_seq_len.min(8);
    let ids = (0..ROUTER_SAMPLES * seq)
        .map(|_| rng.below(model.config.vocab_size))
        .collect();
    let batch = TokenBatch::new(ROUTER_SAMPLES, seq, ids)?;
    let traces = model.ffn_traces(&batch)?;
    for (layer, (input, act)) in traces.into_iter().enumerate() {
        let moe = model.blocks[layer].moe.as_ref().expect("moefied");
        let rows = ROUTER_SAMPLES * seq;
        let scores = moe.scores(act.data(), input.data(), rows);
        let e = moe.n_experts;
        let labels: Vec<usize> = (0..rows)
            .map(|r| {
                let s = &scores[r * e..(r + 1) * e];
                (0..e).fold(0, |best, j| if s[j] > s[best] { j } else { best })
            })
            .collect();
        let d = input.shape()[1];
        let mut w = Tensor::<T>::randn(&[e, d], 0.02, &mut rng).with_grad();
        let mut state = vec![AdamState::default()];
        let hp = AdamW {
            lr: 1e-2,
            weight_decay: 0.0,
            ..AdamW::default()
        };
        for step in 0..ROUTER_STEPS {
            let mut tape = Tape::new();
            let x = tape.leaf(&input);
            let wv = tape.leaf(&w);
            let logits = tape.linear(x, wv, None)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            tape.backward(loss)?;
            w.zero_grad();
            tape.write_grad(&mut w)?;
            adamw_step(&mut [&mut w], &mut state, &hp, step)?;
        }
        w.set_requires_grad(false);
        let moe = model.blocks[layer].moe.as_mut().expect("moefied");
        moe.router = Some(w);
        moe.mode = RouterMode::Learned;
    }
    Ok(())
}

// ----- pipeline ----------------------------------------------------------

fn at_step(e: Error, i: usize, step: &CompressionStep) -> Error {
    let tag = |m: String| format!("step {i} ({step}): {m}");
    match e {
        Error::Config(m) => Error::Config(tag(m)),
        Error::Dimension(m) => Error::Dimension(tag(m)),
        Error::Index(m) => Error::Index(tag(m)),
        Error::Contract(m) => Error::Contract(tag(m)),
        Error::Internal(m) => Error::Internal(tag(m)),
        Error::Format(m) => Error::Format(tag(m)),
        other => other,
    }
}

fn apply_step<T: Element>(
    model: &mut TransformerModel<T>,
    step: &CompressionStep,
    seed: u64,
) -> Result<()> {
    match *step {
        CompressionStep::Quantize { bits } => quantize(model, bits),
        CompressionStep::PruneUnstructured { sparsity } => prune_unstructured(model, sparsity),
        CompressionStep::PruneStructured {
            ffn_keep_fraction,
            heads_keep_fraction,
        } => prune_structured(model, ffn_keep_fraction, heads_keep_fraction),
        CompressionStep::Moefy {
            n_experts,
            top_k,
            router,
        } => moefy(model, n_experts, top_k, router, seed),
    }
}

/// Applies `spec` in order to an adapter-free model and reports per-step
/// parameter, storage and MAC changes. The backbone ends frozen.
pub fn compress<T: Element>(
    model: &mut TransformerModel<T>,
    spec: &CompressionSpec,
) -> Result<CompressionReport> {
    spec.validate()?;
    if !model.adapter_sets().is_empty() {
        return Err(Error::Contract("detach adapters before compressing".into()));
    }
    model.freeze_backbone();
    let mut report = CompressionReport::default();
    for (i, step) in spec.steps.iter().enumerate() {
        let params_before = model.effective_param_count();
        let bytes_before = storage_bytes(model);
        let macs_before = effective_macs(model);
        apply_step(model, step, spec.seed).map_err(|e| at_step(e, i, step))?;
        report.steps.push(StepReport {
            step: step.to_string(),
            params_before,
            params_after: model.effective_param_count(),
            bytes_before,
            bytes_after: storage_bytes(model),
            mac_fraction: effective_macs(model) / macs_before,
        });
    }
    Ok(report)
}
