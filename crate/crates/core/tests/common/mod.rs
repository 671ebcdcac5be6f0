#![allow(dead_code)]

use calora_core::model::{TokenBatch, TransformerConfig, TransformerModel};
use calora_core::rng::RngState;
use calora_core::tasks::VOCAB_SIZE;
use calora_core::tensor::{Tape, Tensor, Var};
use calora_core::Result;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn tiny_config() -> TransformerConfig {
    TransformerConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: VOCAB_SIZE,
        max_seq_len: 8,
        ..TransformerConfig::default()
    }
}

pub fn tiny_model(seed: u64) -> TransformerModel<f64> {
    TransformerModel::new(tiny_config(), seed).unwrap()
}

pub fn random_batch(batch: usize, seq: usize, seed: u64) -> TokenBatch {
    let mut rng = RngState::new(seed, 99);
    let ids = (0..batch * seq).map(|_| rng.below(VOCAB_SIZE)).collect();
    TokenBatch::new(batch, seq, ids).unwrap()
}

pub fn targets(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = RngState::new(seed, 98);
    (0..n).map(|_| rng.below(VOCAB_SIZE)).collect()
}

/// Overwrites `t` with Gaussian noise of the given std, keeping its id.
pub fn randomize(t: &mut Tensor<f64>, std: f64, rng: &mut RngState) {
    for x in t.data_mut() {
        *x = rng.normal() * std;
    }
}

/// Gives every adapter weight of `model` random non-zero values so that
/// no gradient is trivially zero.
pub fn perturb_adapters(model: &mut TransformerModel<f64>, seed: u64) {
    let mut rng = RngState::new(seed, 97);
    let tasks: Vec<String> = model
        .adapter_sets()
        .iter()
        .map(|s| s.task.clone())
        .collect();
    for task in tasks {
        let set = model.adapter_set_mut(&task).unwrap();
        for l in set.lora.values_mut() {
            randomize(&mut l.a, 0.3, &mut rng);
            randomize(&mut l.b, 0.3, &mut rng);
        }
        for r in set.recovery.values_mut() {
            randomize(&mut r.d, 0.3, &mut rng);
            randomize(&mut r.u, 0.3, &mut rng);
        }
    }
}

pub struct FdOutcome {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub tensors: usize,
    /// Tensor index, coordinate, analytic and numeric value of the worst
    /// coordinate.
    pub worst: (usize, usize, f64, f64),
}

fn eval<F>(model: &TransformerModel<f64>, build: &F) -> (f64, Vec<bool>)
where
    F: Fn(&TransformerModel<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = build(model, &mut tape).unwrap();
    (tape.scalar(root), tape.kink_signature())
}

/// Central finite-difference check of every trainable tensor of `model`
/// against reverse-mode gradients of the scalar built by `build`.
/// Coordinates whose perturbation crosses a kink (relu sign, selection
/// mask) are skipped. `stride` > 1 checks every stride-th coordinate.
pub fn fd_check<F>(model: &TransformerModel<f64>, build: F, stride: usize) -> FdOutcome
where
    F: Fn(&TransformerModel<f64>, &mut Tape<f64>) -> Result<Var>,
{
    // Clones get fresh tensor ids, so the tape is built from the copy.
    let mut probe = model.clone();
    let mut tape = Tape::new();
    let root = build(&probe, &mut tape).unwrap();
    let base_sig = tape.kink_signature();
    tape.backward(root).unwrap();
    let analytic: Vec<Vec<f64>> = probe
        .trainable_params_mut()
        .iter()
        .map(|t| {
            tape.grad_of(t)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let mut out = FdOutcome {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
        tensors: analytic.len(),
        worst: (0, 0, 0.0, 0.0),
    };
    for (ti, grad) in analytic.iter().enumerate() {
        for j in (0..grad.len()).step_by(stride.max(1)) {
            let orig = probe.trainable_params_mut()[ti].data()[j];
            probe.trainable_params_mut()[ti].data_mut()[j] = orig + FD_STEP;
            let (lp, sp) = eval(&probe, &build);
            probe.trainable_params_mut()[ti].data_mut()[j] = orig - FD_STEP;
            let (lm, sm) = eval(&probe, &build);
            probe.trainable_params_mut()[ti].data_mut()[j] = orig;
            if sp != base_sig || sm != base_sig {
                out.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let a = grad[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if rel > out.max_rel_err {
                out.max_rel_err = rel;
                out.worst = (ti, j, a, numeric);
            }
            out.checked += 1;
        }
    }
    out
}

/// Mean cross-entropy of the last-position logits against `targets`.
pub fn last_ce(
    model: &TransformerModel<f64>,
    tape: &mut Tape<f64>,
    batch: &TokenBatch,
    targets: &[usize],
) -> Result<Var> {
    let logits = model.last_logits(tape, batch)?;
    tape.softmax_cross_entropy(logits, targets)
}
