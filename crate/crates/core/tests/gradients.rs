mod common;

use calora_core::compression::{compress, CompressionSpec, CompressionStep};
use calora_core::model::{RouterMode, SlotKind, SlotPath};
use calora_core::rng::RngState;
use calora_core::tensor::{Tape, Tensor, Var};
use calora_core::training::{
    calora_adapters, distill_loss, AdapterConfig, DistillTarget, Mechanisms,
};
use calora_core::Result;
use common::*;

const TOL: f64 = 1e-4;

fn leaf(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = RngState::new(seed, 1);
    Tensor::randn(shape, 1.0, &mut rng).with_grad()
}

/// FD check of a small op graph: the output is contracted with fixed
/// random weights so every output element contributes differently.
fn check_op<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let build = |vals: &[Tensor<f64>], tape: &mut Tape<f64>| -> Var {
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t)).collect();
        let y = f(tape, &vars).unwrap();
        let shape = tape.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let mut rng = RngState::new(4242, 2);
        let w = tape
            .constant(shape, (0..n).map(|_| rng.normal()).collect())
            .unwrap();
        let p = tape.mul(y, w).unwrap();
        tape.sum(p)
    };
    let mut tape = Tape::new();
    let root = build(inputs, &mut tape);
    let sig = tape.kink_signature();
    tape.backward(root).unwrap();
    let grads: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| {
            tape.grad_of(t)
                .map(|g| g.to_vec())
                .unwrap_or(vec![0.0; t.len()])
        })
        .collect();
    let mut worst: f64 = 0.0;
    let mut vals = inputs.to_vec();
    for (i, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let orig = vals[i].data()[j];
            vals[i].data_mut()[j] = orig + FD_STEP;
            let mut tp = Tape::new();
            let r = build(&vals, &mut tp);
            let (lp, sp) = (tp.scalar(r), tp.kink_signature());
            vals[i].data_mut()[j] = orig - FD_STEP;
            let mut tm = Tape::new();
            let r = build(&vals, &mut tm);
            let (lm, sm) = (tm.scalar(r), tm.kink_signature());
            vals[i].data_mut()[j] = orig;
            if sp != sig || sm != sig {
                continue;
            }
            let num = (lp - lm) / (2.0 * FD_STEP);
            let rel = (g[j] - num).abs() / g[j].abs().max(num.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn linear_algebra_ops() {
    let a = leaf(&[3, 4], 1);
    let b = leaf(&[4, 2], 2);
    assert!(check_op(&[a.clone(), b], |t, v| t.matmul(v[0], v[1])) < TOL);
    let w = leaf(&[5, 4], 3);
    let bias = leaf(&[5], 4);
    assert!(
        check_op(&[a.clone(), w.clone(), bias], |t, v| t.linear(
            v[0],
            v[1],
            Some(v[2])
        )) < TOL
    );
    assert!(check_op(&[a.clone(), w], |t, v| t.linear(v[0], v[1], None)) < TOL);
    assert!(check_op(std::slice::from_ref(&a), |t, v| t.transpose(v[0])) < TOL);
    assert!(check_op(&[a], |t, v| t.reshape(v[0], vec![2, 6])) < TOL);
}

#[test]
fn elementwise_ops_with_broadcast() {
    let a = leaf(&[3, 4], 5);
    let row = leaf(&[4], 6);
    let s = leaf(&[1], 7);
    let b = leaf(&[3, 4], 8);
    assert!(check_op(&[a.clone(), row.clone()], |t, v| t.add(v[0], v[1])) < TOL);
    assert!(check_op(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])) < TOL);
    assert!(check_op(&[a.clone(), row], |t, v| t.mul(v[0], v[1])) < TOL);
    assert!(check_op(&[a.clone(), s], |t, v| t.mul(v[0], v[1])) < TOL);
    assert!(check_op(std::slice::from_ref(&a), |t, v| Ok(t.scale(v[0], -1.7))) < TOL);
    assert!(check_op(std::slice::from_ref(&a), |t, v| Ok(t.relu(v[0]))) < TOL);
    assert!(check_op(std::slice::from_ref(&a), |t, v| Ok(t.gelu(v[0]))) < TOL);
    assert!(check_op(std::slice::from_ref(&a), |t, v| Ok(t.tanh(v[0]))) < TOL);
    let keep: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
    assert!(check_op(std::slice::from_ref(&a), move |t, v| t.select(v[0], keep.clone())) < TOL);
    assert!(check_op(&[a.clone(), b], |t, v| t.mse(v[0], v[1])) < TOL);
    assert!(check_op(std::slice::from_ref(&a), |t, v| Ok(t.mean(v[0]))) < TOL);
    assert!(check_op(&[a], |t, v| Ok(t.sum(v[0]))) < TOL);
}

#[test]
fn normalization_and_softmax_ops() {
    let x = leaf(&[3, 6], 9);
    let g = leaf(&[6], 10);
    let b = leaf(&[6], 11);
    assert!(
        check_op(&[x.clone(), g, b], |t, v| t
            .layer_norm(v[0], v[1], v[2], 1e-5))
            < TOL
    );
    assert!(check_op(std::slice::from_ref(&x), |t, v| Ok(t.softmax(v[0]))) < TOL);
    assert!(check_op(&[x], |t, v| t.softmax_cross_entropy(v[0], &[0, 5, 2])) < TOL);
}

#[test]
fn indexing_ops() {
    let table = leaf(&[5, 3], 12);
    assert!(check_op(std::slice::from_ref(&table), |t, v| t.embedding(v[0], &[4, 0, 4, 2])) < TOL);
    assert!(check_op(&[table], |t, v| t.gather_rows(v[0], &[1, 1, 3])) < TOL);
}

#[test]
fn attention_op_with_and_without_head_mask() {
    let (batch, seq, d) = (2, 3, 4);
    let q = leaf(&[batch * seq, d], 13);
    let k = leaf(&[batch * seq, d], 14);
    let v = leaf(&[batch * seq, d], 15);
    let ins = [q, k, v];
    assert!(
        check_op(&ins, |t, x| t
            .causal_attention(x[0], x[1], x[2], batch, seq, 2, None))
            < TOL
    );
    assert!(
        check_op(&ins, |t, x| t.causal_attention(
            x[0],
            x[1],
            x[2],
            batch,
            seq,
            2,
            Some(vec![false, true])
        )) < TOL
    );
}

fn compressed_student(seed: u64) -> calora_core::model::TransformerModel<f64> {
    let mut m = tiny_model(seed);
    let spec = CompressionSpec::new(vec![
        CompressionStep::PruneStructured {
            ffn_keep_fraction: 0.75,
            heads_keep_fraction: 0.5,
        },
        CompressionStep::Moefy {
            n_experts: 4,
            top_k: 2,
            router: RouterMode::Oracle,
        },
        CompressionStep::PruneUnstructured { sparsity: 0.3 },
        CompressionStep::Quantize { bits: 8 },
    ]);
    compress(&mut m, &spec).unwrap();
    m
}

#[test]
fn full_calora_forward_gradients_match_finite_differences() {
    let teacher = {
        let mut t = tiny_model(21);
        let set = calora_adapters(
            None,
            &t,
            "task",
            &AdapterConfig::default(),
            Mechanisms::NONE,
            1,
        )
        .unwrap();
        t.attach_set(set).unwrap();
        t.freeze_backbone();
        perturb_adapters(&mut t, 5);
        t
    };
    let mut student = compressed_student(21);
    let adapters = AdapterConfig {
        lora_rank: 2,
        recovery_rank: 2,
        ..AdapterConfig::default()
    };
    let set = calora_adapters(
        None,
        &student,
        "task",
        &adapters,
        Mechanisms {
            inherit: false,
            recover: true,
            distill: true,
        },
        3,
    )
    .unwrap();
    student.attach_set(set).unwrap();
    perturb_adapters(&mut student, 6);
    assert!(student.param_count(true) > 0);
    assert_eq!(
        student.param_count(true),
        student.adapter_sets()[0].param_count(),
        "backbone must be frozen"
    );

    let batch = random_batch(2, 5, 7);
    let tg = targets(2, 7);
    let alpha = 0.05;
    let out = fd_check(
        &student,
        |m, tape| {
            let task = last_ce(m, tape, &batch, &tg)?;
            let d = distill_loss(tape, &teacher, m, &batch, DistillTarget::Logits)?;
            let d = tape.scale(d, alpha);
            tape.add(task, d)
        },
        1,
    );
    // 2 layers × (2 LoRA + 6 recovery) slots × 2 tensors.
    assert_eq!(out.tensors, 32);
    assert!(
        out.checked > out.skipped,
        "{} checked, {} skipped",
        out.checked,
        out.skipped
    );
    assert!(
        out.max_rel_err < TOL,
        "max relative error {} at {:?}",
        out.max_rel_err,
        out.worst
    );
}

#[test]
fn full_model_backbone_gradients_match_finite_differences() {
    let mut m = tiny_model(31);
    let mut rng = RngState::new(1, 1);
    for b in m.blocks.iter_mut() {
        randomize(&mut b.q.weight, 0.5, &mut rng);
        randomize(&mut b.k.weight, 0.5, &mut rng);
    }
    let set = calora_adapters(
        None,
        &m,
        "t",
        &AdapterConfig::default(),
        Mechanisms::NONE,
        2,
    )
    .unwrap();
    m.attach_set(set).unwrap();
    perturb_adapters(&mut m, 3);
    let batch = random_batch(2, 4, 8);
    let tg = targets(2, 8);
    let out = fd_check(&m, |m, tape| last_ce(m, tape, &batch, &tg), 3);
    assert!(out.checked > 300);
    assert!(
        out.max_rel_err < TOL,
        "max relative error {} at {:?}",
        out.max_rel_err,
        out.worst
    );
}

#[test]
fn hidden_state_distillation_gradients() {
    let teacher = tiny_model(41);
    let mut student = compressed_student(42);
    let set = calora_adapters(
        None,
        &student,
        "t",
        &AdapterConfig::default(),
        Mechanisms {
            inherit: false,
            recover: true,
            distill: true,
        },
        4,
    )
    .unwrap();
    student.attach_set(set).unwrap();
    perturb_adapters(&mut student, 9);
    let batch = random_batch(3, 4, 10);
    let out = fd_check(
        &student,
        |m, tape| distill_loss(tape, &teacher, m, &batch, DistillTarget::LastHidden),
        2,
    );
    assert!(
        out.max_rel_err < TOL,
        "max relative error {} at {:?}",
        out.max_rel_err,
        out.worst
    );
}

#[test]
fn frozen_tensors_receive_no_gradient() {
    let mut m = compressed_student(51);
    let set = calora_adapters(
        None,
        &m,
        "t",
        &AdapterConfig::default(),
        Mechanisms::NONE,
        1,
    )
    .unwrap();
    m.attach_set(set).unwrap();
    let batch = random_batch(2, 4, 11);
    let tg = targets(2, 11);
    let mut tape = Tape::new();
    let root = last_ce(&m, &mut tape, &batch, &tg).unwrap();
    tape.backward(root).unwrap();
    let q = &m.slot(&SlotPath::new(0, SlotKind::Query)).unwrap().weight;
    assert!(tape.grad_of(q).is_none());
    assert!(tape.grad_of(&m.tok_emb).is_none());
}
