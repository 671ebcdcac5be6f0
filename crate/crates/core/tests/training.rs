mod common;

use calora_core::adapters::Provenance;
use calora_core::compression::{compress, CompressionSpec, CompressionStep};
use calora_core::model::{SlotKind, TransformerModel};
use calora_core::tasks::{generate, SampleCounts, Split, SyntheticCorpus, TaskKind, TaskSpec};
use calora_core::tensor::Tape;
use calora_core::training::{
    backbone_digest, distill_loss, evaluate, fresh_lora_set, full_finetune, train_baseline,
    train_calora, train_lora, write_loss_csv, AdapterConfig, Baseline, BatchSampler, DistillTarget,
    Mechanisms, RunRecord, TrainConfig, LARGE_LORA_RANK,
};
use calora_core::Error;
use common::*;

type M = TransformerModel<f64>;

const RECOVER: Mechanisms = Mechanisms {
    inherit: false,
    recover: true,
    distill: false,
};

const TASK: &str = "modadd5";

fn data() -> (SyntheticCorpus, SyntheticCorpus) {
    let spec = TaskSpec::new(
        TaskKind::ModAdd { p: 5 },
        2,
        3,
        SampleCounts {
            pretrain: 0,
            train: 200,
            eval: 20,
        },
        3,
    );
    (
        generate(&spec, Split::Train).unwrap(),
        generate(&spec, Split::Eval).unwrap(),
    )
}

fn cfg(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        batch_size: 8,
        max_steps: steps,
        eval_interval: 0,
        seed,
        ..TrainConfig::default()
    }
}

fn adapters() -> AdapterConfig {
    AdapterConfig {
        lora_rank: 2,
        recovery_rank: 2,
        ..AdapterConfig::default()
    }
}

fn teacher() -> M {
    let (train, eval) = data();
    let mut t = tiny_model(1);
    t.freeze_backbone();
    t.attach_set(fresh_lora_set(&t, TASK, &adapters(), 0).unwrap())
        .unwrap();
    train_lora(&mut t, &train, &eval, &cfg(30, 0)).unwrap();
    t.adapter_set_mut(TASK).unwrap().set_trainable(false);
    t
}

fn student() -> M {
    let mut m = tiny_model(1);
    let spec = CompressionSpec::new(vec![
        CompressionStep::PruneUnstructured { sparsity: 0.5 },
        CompressionStep::Quantize { bits: 8 },
    ]);
    compress(&mut m, &spec).unwrap();
    m
}

fn adapter_bits(m: &M, task: &str) -> Vec<Vec<u64>> {
    let set = m.adapter_set(task).unwrap();
    set.lora
        .values()
        .flat_map(|l| [l.a.bits(), l.b.bits()])
        .chain(set.recovery.values().flat_map(|r| [r.d.bits(), r.u.bits()]))
        .collect()
}

fn loss_bits(r: &RunRecord) -> Vec<(u64, u64, u64)> {
    r.losses
        .iter()
        .map(|l| {
            (
                l.task_loss.to_bits(),
                l.distill_loss.to_bits(),
                l.combined_loss.to_bits(),
            )
        })
        .collect()
}

#[test]
fn calora_leaves_backbone_and_teacher_untouched() {
    let (train, eval) = data();
    let t = teacher();
    let t_digest = backbone_digest(&t);
    let t_adapters = adapter_bits(&t, TASK);
    let mut s = student();
    let s_digest = backbone_digest(&s);
    let r = train_calora(
        Some(&t),
        &mut s,
        TASK,
        &train,
        &eval,
        &cfg(40, 1),
        &adapters(),
        Mechanisms::ALL,
    )
    .unwrap();
    assert_eq!(backbone_digest(&s), s_digest);
    assert_eq!(backbone_digest(&t), t_digest);
    assert_eq!(adapter_bits(&t, TASK), t_adapters);
    assert_eq!(r.losses.len(), 40);
    assert!(r.provenance.starts_with("inherited-from:"));
    assert_eq!(
        r.trainable_params,
        s.adapter_set(TASK).unwrap().param_count()
    );
    // Adapters actually moved.
    let set = s.adapter_set(TASK).unwrap();
    assert!(set
        .recovery
        .values()
        .any(|r| r.u.data().iter().any(|x| *x != 0.0)));
}

#[test]
fn loss_decomposes_at_every_step() {
    let (train, eval) = data();
    let t = teacher();
    for target in [DistillTarget::Logits, DistillTarget::LastHidden] {
        let mut s = student();
        let c = TrainConfig {
            alpha: 0.37,
            distill_target: target,
            ..cfg(50, 2)
        };
        let r = train_calora(
            Some(&t),
            &mut s,
            TASK,
            &train,
            &eval,
            &c,
            &adapters(),
            Mechanisms::ALL,
        )
        .unwrap();
        for l in &r.losses {
            assert!((l.combined_loss - c.alpha * l.distill_loss - l.task_loss).abs() <= 1e-7);
            assert!(l.distill_loss > 0.0);
        }
    }
}

#[test]
fn zero_alpha_reproduces_the_undistilled_run_bitwise() {
    let (train, eval) = data();
    let t = teacher();
    let run = |distill: bool| {
        let mut s = student();
        let c = TrainConfig {
            alpha: 0.0,
            ..cfg(60, 3)
        };
        let m = Mechanisms {
            inherit: true,
            recover: true,
            distill,
        };
        let r = train_calora(Some(&t), &mut s, TASK, &train, &eval, &c, &adapters(), m).unwrap();
        (r, adapter_bits(&s, TASK))
    };
    let (with, a) = run(true);
    let (without, b) = run(false);
    assert_eq!(a, b);
    let task = |r: &RunRecord| {
        r.losses
            .iter()
            .map(|l| l.task_loss.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(task(&with), task(&without));
    for l in &with.losses {
        assert_eq!(l.combined_loss.to_bits(), l.task_loss.to_bits());
    }
    assert_eq!(with.final_metric.to_bits(), without.final_metric.to_bits());
}

#[test]
fn all_mechanisms_off_equals_plain_lora() {
    let (train, eval) = data();
    let mut a = student();
    let ra = train_calora(
        None,
        &mut a,
        TASK,
        &train,
        &eval,
        &cfg(50, 4),
        &adapters(),
        Mechanisms::NONE,
    )
    .unwrap();
    let mut b = student();
    b.attach_set(fresh_lora_set(&b, TASK, &adapters(), 4).unwrap())
        .unwrap();
    let rb = train_lora(&mut b, &train, &eval, &cfg(50, 4)).unwrap();
    assert_eq!(loss_bits(&ra), loss_bits(&rb));
    assert_eq!(adapter_bits(&a, TASK), adapter_bits(&b, TASK));
    assert_eq!(ra.provenance, Provenance::Scratch.to_string());
}

#[test]
fn runs_are_deterministic_and_seed_sensitive() {
    let (train, eval) = data();
    let t = teacher();
    let run = |seed| {
        let mut s = student();
        let r = train_calora(
            Some(&t),
            &mut s,
            TASK,
            &train,
            &eval,
            &cfg(30, seed),
            &adapters(),
            Mechanisms::ALL,
        )
        .unwrap();
        (loss_bits(&r), adapter_bits(&s, TASK))
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5).0, run(6).0);
}

#[test]
fn masks_persist_through_training() {
    let (train, eval) = data();
    // Pruned but unquantized backbone, fully fine-tuned.
    let mut m = tiny_model(2);
    compress(
        &mut m,
        &CompressionSpec::new(vec![CompressionStep::PruneUnstructured { sparsity: 0.5 }]),
    )
    .unwrap();
    let r = full_finetune(&mut m, &train, &eval, &cfg(200, 7)).unwrap();
    assert_eq!(r.losses.len(), 200);
    let mut moved = false;
    for p in m.slot_paths() {
        let s = m.slot(&p).unwrap();
        for (w, k) in s.weight.data().iter().zip(s.mask().unwrap().keep()) {
            if !k {
                assert_eq!(*w, 0.0, "{p}");
            } else {
                moved |= *w != 0.0;
            }
        }
    }
    assert!(moved);

    // Compressed student under adapter tuning for 100 steps.
    let mut s = student();
    let masks: Vec<Vec<bool>> = s
        .slot_paths()
        .iter()
        .map(|p| s.slot(p).unwrap().mask().unwrap().keep().to_vec())
        .collect();
    train_calora(
        None,
        &mut s,
        TASK,
        &train,
        &eval,
        &cfg(100, 8),
        &adapters(),
        RECOVER,
    )
    .unwrap();
    for (p, keep) in s.slot_paths().iter().zip(masks) {
        let slot = s.slot(p).unwrap();
        assert_eq!(slot.mask().unwrap().keep(), &keep[..]);
        for (w, k) in slot.weight.data().iter().zip(&keep) {
            if !k {
                assert_eq!(*w, 0.0);
            }
        }
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (train, eval) = data();
    let mut s = student();
    let c = TrainConfig {
        lr: 0.0,
        weight_decay: 0.0,
        ..cfg(20, 9)
    };
    let before = s.clone();
    train_calora(None, &mut s, TASK, &train, &eval, &c, &adapters(), RECOVER).unwrap();
    let set = s.adapter_set(TASK).unwrap();
    assert!(set
        .lora
        .values()
        .all(|l| l.b.data().iter().all(|x| *x == 0.0)));
    let b = random_batch(2, 4, 1);
    assert_eq!(
        before.forward(&b).unwrap().bits(),
        s.forward(&b).unwrap().bits()
    );
}

#[test]
fn hidden_distillation_of_a_shifted_copy_is_epsilon_squared() {
    let teacher = tiny_model(3);
    let b = random_batch(3, 5, 2);
    for eps in [0.5, 1e-2, 3.0] {
        let mut student = teacher.clone();
        for x in student.ln_f.beta.data_mut() {
            *x += eps;
        }
        let mut tape = Tape::new();
        let d = distill_loss(&mut tape, &teacher, &student, &b, DistillTarget::LastHidden).unwrap();
        assert!((tape.scalar(d) - eps * eps).abs() < 1e-12 * eps.max(1.0).powi(2));
    }
    let mut tape = Tape::new();
    let d = distill_loss(
        &mut tape,
        &teacher,
        &teacher.clone(),
        &b,
        DistillTarget::Logits,
    )
    .unwrap();
    assert_eq!(tape.scalar(d), 0.0);
}

#[test]
fn contract_violations_are_reported() {
    let (train, eval) = data();
    let mut s = student();
    let err = train_calora(
        None,
        &mut s,
        TASK,
        &train,
        &eval,
        &cfg(5, 0),
        &adapters(),
        Mechanisms::ALL,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let no_lora = tiny_model(4);
    let err = train_calora(
        Some(&no_lora),
        &mut s,
        TASK,
        &train,
        &eval,
        &cfg(5, 0),
        &adapters(),
        Mechanisms {
            inherit: true,
            recover: false,
            distill: false,
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    // Quantized models refuse full fine-tuning.
    let err = full_finetune(&mut student(), &train, &eval, &cfg(5, 0)).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    // A trainable backbone is refused by adapter tuning.
    let mut m = tiny_model(5);
    m.attach_set(fresh_lora_set(&m, TASK, &adapters(), 0).unwrap())
        .unwrap();
    assert!(matches!(
        train_lora(&mut m, &train, &eval, &cfg(5, 0)),
        Err(Error::Contract(_))
    ));
    let bad = TrainConfig {
        alpha: -1.0,
        ..cfg(5, 0)
    };
    let err = train_calora(
        None,
        &mut student(),
        TASK,
        &train,
        &eval,
        &bad,
        &adapters(),
        Mechanisms::NONE,
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn diverging_training_is_a_training_error() {
    let (train, eval) = data();
    let mut s = student();
    let c = TrainConfig {
        lr: 1e12,
        ..cfg(200, 1)
    };
    match train_calora(None, &mut s, TASK, &train, &eval, &c, &adapters(), RECOVER) {
        Err(Error::Training { .. }) => {}
        Ok(r) => assert!(r.losses.iter().all(|l| l.task_loss.is_finite())),
        Err(e) => panic!("unexpected error {e}"),
    }
}

#[test]
fn baselines_have_expected_shapes() {
    let (train, eval) = data();
    let t = teacher();
    let a = adapters();
    let mut s = student();
    let r = train_baseline(
        Some(&t),
        &mut s,
        TASK,
        &train,
        &eval,
        &cfg(10, 1),
        &a,
        Baseline::LoraPlusLora,
    )
    .unwrap();
    let extra = s.adapter_set(&format!("{TASK}.extra")).unwrap();
    assert_eq!(extra.lora.len(), 2 * SlotKind::ALL.len());
    assert!(r.losses.iter().all(|l| l.distill_loss > 0.0));
    assert_eq!(
        r.trainable_params,
        s.adapter_sets()
            .iter()
            .map(|x| x.param_count())
            .sum::<usize>()
    );

    let mut s = student();
    let r = train_baseline(
        Some(&t),
        &mut s,
        TASK,
        &train,
        &eval,
        &cfg(10, 1),
        &a,
        Baseline::LargeLora,
    )
    .unwrap();
    let set = s.adapter_set(TASK).unwrap();
    assert!(set.lora.values().all(|l| l.rank() == LARGE_LORA_RANK));
    assert!(r.losses.iter().all(|l| l.distill_loss == 0.0));
}

#[test]
fn curve_and_loss_csv() {
    let (train, eval) = data();
    let mut s = student();
    let c = TrainConfig {
        eval_interval: 10,
        ..cfg(30, 1)
    };
    let r = train_calora(
        None,
        &mut s,
        TASK,
        &train,
        &eval,
        &c,
        &adapters(),
        Mechanisms::NONE,
    )
    .unwrap();
    let steps: Vec<usize> = r.curve.iter().map(|p| p.step).collect();
    assert_eq!(steps, vec![0, 10, 20, 30]);
    assert_eq!(r.final_metric, r.curve[3].metric);
    assert_eq!(r.final_metric, evaluate(&s, &eval).unwrap());
    let mut buf = Vec::new();
    write_loss_csv(&mut buf, &r.losses).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 31);
    assert!(text.starts_with("step,task_loss,distill_loss,combined_loss,eval_metric"));
}

#[test]
fn batches_come_from_one_length_bucket() {
    let (train, _) = data();
    let mut s = BatchSampler::new(&train, 16, 3).unwrap();
    let mut lens = std::collections::HashSet::new();
    for _ in 0..50 {
        let (b, t) = s.next_batch().unwrap();
        assert_eq!(b.batch, 16);
        assert_eq!(t.len(), 16);
        lens.insert(b.seq);
    }
    assert_eq!(lens.len(), 2);
}
