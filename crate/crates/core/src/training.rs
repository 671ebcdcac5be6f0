//! Optimization procedures: full fine-tuning, frozen-backbone LoRA tuning,
//! and compression-aware tuning with inherited LoRA weights, recovery
//! bypasses and output distillation from the uncompressed teacher.

use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{inherit, AdapterSet};
use crate::error::{Error, Result};
use crate::model::{SlotKind, SlotPath, TokenBatch, TransformerModel};
use crate::rng::{streams, RngState};
use crate::tasks::SyntheticCorpus;
use crate::tensor::{adamw_step, AdamState, AdamW, Element, Tape, Tensor, Var};

/// Learning rates searched when a run asks for a sweep.
pub const LR_GRID: [f64; 4] = [1e-3, 5e-4, 1e-4, 1e-5];
pub const DEFAULT_ALPHA: f64 = 0.05;
const EVAL_CHUNK: usize = 256;

/// Which student output is matched against the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillTarget {
    #[default]
    Logits,
    LastHidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub weight_decay: f64,
    pub alpha: f64,
    pub seed: u64,
    /// Evaluate every this many steps (0 disables the curve).
    pub eval_interval: usize,
    pub distill_target: DistillTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            max_steps: 2000,
            weight_decay: 1e-2,
            alpha: DEFAULT_ALPHA,
            seed: 0,
            eval_interval: 0,
            distill_target: DistillTarget::Logits,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("alpha must be a non-negative number"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("learning rate must be a non-negative number"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

/// Ranks and placement of task adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub lora_rank: usize,
    pub lora_slots: Vec<SlotKind>,
    pub recovery_rank: usize,
    pub recovery_slots: Vec<SlotKind>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            lora_rank: 8,
            lora_slots: vec![SlotKind::Query, SlotKind::Key],
            recovery_rank: 8,
            recovery_slots: SlotKind::ALL.to_vec(),
        }
    }
}

impl AdapterConfig {
    pub fn lora_paths(&self, n_layers: usize) -> Vec<SlotPath> {
        SlotPath::grid(n_layers, &self.lora_slots)
    }

    pub fn recovery_paths(&self, n_layers: usize) -> Vec<SlotPath> {
        SlotPath::grid(n_layers, &self.recovery_slots)
    }
}

/// The three switchable ingredients of compression-aware tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Mechanisms {
    pub inherit: bool,
    pub recover: bool,
    pub distill: bool,
}

impl Mechanisms {
    pub const NONE: Mechanisms = Mechanisms {
        inherit: false,
        recover: false,
        distill: false,
    };
    pub const ALL: Mechanisms = Mechanisms {
        inherit: true,
        recover: true,
        distill: true,
    };

    /// All eight combinations: none, each single mechanism, each pair,
    /// then all three.
    pub fn grid() -> Vec<Mechanisms> {
        let m = |inherit, recover, distill| Mechanisms {
            inherit,
            recover,
            distill,
        };
        vec![
            m(false, false, false),
            m(true, false, false),
            m(false, true, false),
            m(false, false, true),
            m(true, true, false),
            m(true, false, true),
            m(false, true, true),
            m(true, true, true),
        ]
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.inherit {
            parts.push("inherit");
        }
        if self.recover {
            parts.push("recover");
        }
        if self.distill {
            parts.push("distill");
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub task_loss: f64,
    pub distill_loss: f64,
    pub combined_loss: f64,
    pub eval_metric: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: String,
    pub task: String,
    pub config: TrainConfig,
    #[serde(default)]
    pub config_hash: String,
    pub seed: u64,
    pub provenance: String,
    pub mechanisms: Mechanisms,
    pub trainable_params: usize,
    pub losses: Vec<LossReport>,
    pub curve: Vec<CurvePoint>,
    pub final_metric: f64,
}

impl RunRecord {
    /// Short file-name-safe label: the mechanism combination for
    /// compression-aware runs, otherwise the run kind.
    pub fn label(&self) -> String {
        let raw = if self.kind == "calora" {
            self.mechanisms.label()
        } else {
            self.kind.clone()
        };
        raw.chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() {
                    c.to_ascii_lowercase()
                } else {
                    '-'
                }
            })
            .collect()
    }
}

/// Writes per-step losses as `step,task_loss,distill_loss,combined_loss,eval_metric`.
pub fn write_loss_csv<W: Write>(mut w: W, losses: &[LossReport]) -> Result<()> {
    writeln!(w, "step,task_loss,distill_loss,combined_loss,eval_metric")?;
    for l in losses {
        let metric = l.eval_metric.map(|m| m.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{}",
            l.step, l.task_loss, l.distill_loss, l.combined_loss, metric
        )?;
    }
    Ok(())
}

/// Draws equal-length batches: a length bucket is picked with probability
/// proportional to its size, then `batch_size` samples uniformly from it.
pub struct BatchSampler<'a> {
    corpus: &'a SyntheticCorpus,
    buckets: Vec<Vec<usize>>,
    rng: RngState,
    batch_size: usize,
}

impl<'a> BatchSampler<'a> {
    pub fn new(corpus: &'a SyntheticCorpus, batch_size: usize, seed: u64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::config("training corpus is empty"));
        }
        Ok(Self {
            corpus,
            buckets: corpus.buckets().into_values().collect(),
            rng: RngState::new(seed, streams::BATCHES),
            batch_size,
        })
    }

    pub fn next_batch(&mut self) -> Result<(TokenBatch, Vec<usize>)> {
        let pick = self.rng.below(self.corpus.len());
        let len = self.corpus.samples[pick].input.len();
        let bucket = self
            .buckets
            .iter()
            .find(|b| self.corpus.samples[b[0]].input.len() == len)
            .expect("every sample has a bucket");
        let mut ids = Vec::with_capacity(self.batch_size * len);
        let mut targets = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let s = &self.corpus.samples[bucket[self.rng.below(bucket.len())]];
            ids.extend_from_slice(&s.input);
            targets.push(s.target);
        }
        Ok((TokenBatch::new(self.batch_size, len, ids)?, targets))
    }
}

/// Exact-match accuracy of the final-position argmax.
pub fn evaluate<T: Element>(model: &TransformerModel<T>, data: &SyntheticCorpus) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("evaluation corpus is empty"));
    }
    let mut correct = 0usize;
    for idx in data.buckets().values() {
        for chunk in idx.chunks(EVAL_CHUNK) {
            let rows: Vec<&[usize]> = chunk
                .iter()
                .map(|&i| data.samples[i].input.as_slice())
                .collect();
            let preds = model.predict_last(&TokenBatch::from_rows(&rows)?)?;
            correct += preds
                .iter()
                .zip(chunk)
                .filter(|(p, &i)| **p == data.samples[i].target)
                .count();
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy of `compressed` carrying an untrained copy of `teacher_set`.
pub fn zero_shot_transfer_eval<T: Element>(
    teacher_set: &AdapterSet<T>,
    compressed: &TransformerModel<T>,
    eval: &SyntheticCorpus,
) -> Result<f64> {
    let mut student = compressed.clone();
    student.detach_all();
    student.attach_set(inherit(teacher_set, &student)?)?;
    evaluate(&student, eval)
}

/// Teacher output used as the distillation target, computed without
/// gradient tracking.
pub fn teacher_output<T: Element>(
    teacher: &TransformerModel<T>,
    batch: &TokenBatch,
    target: DistillTarget,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let y = match target {
        DistillTarget::Logits => teacher.logits(&mut tape, batch)?,
        DistillTarget::LastHidden => teacher.hidden_states(&mut tape, batch)?,
    };
    let mut t = tape.to_tensor(y);
    t.set_requires_grad(false);
    Ok(t)
}

/// Mean squared difference between the student's output on the tape and a
/// fixed teacher output, averaged over every output element.
pub fn distill_on_tape<T: Element>(
    tape: &mut Tape<T>,
    student_out: Var,
    teacher_out: &Tensor<T>,
) -> Result<Var> {
    let t = tape.constant(teacher_out.shape().to_vec(), teacher_out.data().to_vec())?;
    tape.mse(student_out, t)
}

/// Distillation loss of a student against a teacher on one batch. Only
/// the student's trainable tensors receive gradients.
pub fn distill_loss<T: Element>(
    tape: &mut Tape<T>,
    teacher: &TransformerModel<T>,
    student: &TransformerModel<T>,
    batch: &TokenBatch,
    target: DistillTarget,
) -> Result<Var> {
    let t = teacher_output(teacher, batch, target)?;
    let s = match target {
        DistillTarget::Logits => student.logits(tape, batch)?,
        DistillTarget::LastHidden => student.hidden_states(tape, batch)?,
    };
    distill_on_tape(tape, s, &t)
}

/// SHA-256 over the bit patterns of every backbone tensor.
pub fn backbone_digest<T: Element>(model: &TransformerModel<T>) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.backbone_tensors() {
        h.update(name.as_bytes());
        for b in t.bits() {
            h.update(b.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

struct LoopSpec<'a, T: Element> {
    teacher: Option<&'a TransformerModel<T>>,
    alpha: f64,
    frozen_backbone: bool,
}

struct LoopOutput {
    losses: Vec<LossReport>,
    curve: Vec<CurvePoint>,
    final_metric: f64,
}

fn train_loop<T: Element>(
    model: &mut TransformerModel<T>,
    data: &SyntheticCorpus,
    eval: &SyntheticCorpus,
    cfg: &TrainConfig,
    spec: LoopSpec<'_, T>,
) -> Result<LoopOutput> {
    cfg.validate()?;
    let digest = spec.frozen_backbone.then(|| backbone_digest(model));
    if spec.frozen_backbone
        && model
            .backbone_tensors()
            .iter()
            .any(|(_, t)| t.requires_grad())
    {
        return Err(Error::Contract(
            "backbone must be frozen for adapter tuning".into(),
        ));
    }
    let hp = cfg.optimizer();
    let mut sampler = BatchSampler::new(data, cfg.batch_size, cfg.seed)?;
    let n_params = model.trainable_params_mut().len();
    let mut states = vec![AdamState::default(); n_params];
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let mut curve = Vec::new();
    let record_curve =
        |model: &TransformerModel<T>, step: usize, curve: &mut Vec<CurvePoint>| -> Result<f64> {
            let metric = evaluate(model, eval)?;
            curve.push(CurvePoint { step, metric });
            Ok(metric)
        };

    for step in 0..cfg.max_steps {
        let metric = if cfg.eval_interval > 0 && step % cfg.eval_interval == 0 {
            Some(record_curve(model, step, &mut curve)?)
        } else {
            None
        };
        let (batch, targets) = sampler.next_batch()?;
        let mut tape = Tape::new();
        let (task, distill) = match spec.teacher {
            Some(teacher) => {
                let t_out = teacher_output(teacher, &batch, cfg.distill_target)?;
                let hidden = model.hidden_states(&mut tape, &batch)?;
                let logits = model.project(&mut tape, hidden)?;
                let last = tape.gather_rows(logits, &batch.last_positions())?;
                let task = tape.softmax_cross_entropy(last, &targets)?;
                let s_out = match cfg.distill_target {
                    DistillTarget::Logits => logits,
                    DistillTarget::LastHidden => hidden,
                };
                (task, Some(distill_on_tape(&mut tape, s_out, &t_out)?))
            }
            None => {
                let last = model.last_logits(&mut tape, &batch)?;
                (tape.softmax_cross_entropy(last, &targets)?, None)
            }
        };
        let root = match distill {
            Some(d) => {
                let scaled = tape.scale(d, T::from_f64(spec.alpha));
                tape.add(task, scaled)?
            }
            None => task,
        };
        let task_loss = tape.scalar(task).as_f64();
        let distill_loss = distill.map(|d| tape.scalar(d).as_f64()).unwrap_or(0.0);
        if !task_loss.is_finite() || !distill_loss.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("non-finite loss (task {task_loss}, distill {distill_loss})"),
            });
        }
        losses.push(LossReport {
            step,
            task_loss,
            distill_loss,
            combined_loss: task_loss + spec.alpha * distill_loss,
            eval_metric: metric,
        });
        tape.backward(root)?;
        let mut params = model.trainable_params_mut();
        for p in params.iter_mut() {
            p.zero_grad();
            tape.write_grad(p)?;
        }
        adamw_step(&mut params, &mut states, &hp, step)?;
    }
    if cfg.eval_interval > 0 && cfg.max_steps.is_multiple_of(cfg.eval_interval) {
        record_curve(model, cfg.max_steps, &mut curve)?;
    }
    let final_metric = match curve.last() {
        Some(p) if p.step == cfg.max_steps => p.metric,
        _ => evaluate(model, eval)?,
    };
    if let Some(d) = digest {
        if backbone_digest(model) != d {
            return Err(Error::Contract(
                "backbone changed during adapter tuning".into(),
            ));
        }
    }
    Ok(LoopOutput {
        losses,
        curve,
        final_metric,
    })
}

fn record(
    kind: &str,
    task: &str,
    cfg: &TrainConfig,
    provenance: String,
    mechanisms: Mechanisms,
    trainable_params: usize,
    out: LoopOutput,
) -> RunRecord {
    RunRecord {
        kind: kind.to_string(),
        task: task.to_string(),
        config: cfg.clone(),
        config_hash: String::new(),
        seed: cfg.seed,
        provenance,
        mechanisms,
        trainable_params,
        losses: out.losses,
        curve: out.curve,
        final_metric: out.final_metric,
    }
}

/// Tunes every backbone parameter on the task loss. Quantized models
/// cannot be fully fine-tuned.
pub fn full_finetune<T: Element>(
    model: &mut TransformerModel<T>,
    data: &SyntheticCorpus,
    eval: &SyntheticCorpus,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    model.set_backbone_trainable(true)?;
    let trainable = model.param_count(true);
    let out = train_loop(
        model,
        data,
        eval,
        cfg,
        LoopSpec {
            teacher: None,
            alpha: 0.0,
            frozen_backbone: false,
        },
    )?;
    Ok(record(
        "full-finetune",
        &data.task_id,
        cfg,
        "scratch".into(),
        Mechanisms::NONE,
        trainable,
        out,
    ))
}

/// Tunes the adapter sets attached to a frozen model on the task loss.
pub fn train_lora<T: Element>(
    model: &mut TransformerModel<T>,
    data: &SyntheticCorpus,
    eval: &SyntheticCorpus,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    let provenance = model
        .adapter_sets()
        .first()
        .map(|s| s.provenance.to_string())
        .ok_or_else(|| Error::config("no adapter set attached"))?;
    let trainable = model.param_count(true);
    let out = train_loop(
        model,
        data,
        eval,
        cfg,
        LoopSpec {
            teacher: None,
            alpha: 0.0,
            frozen_backbone: true,
        },
    )?;
    Ok(record(
        "lora",
        &data.task_id,
        cfg,
        provenance,
        Mechanisms::NONE,
        trainable,
        out,
    ))
}

/// Fresh LoRA set for `task` on `model`, drawn from the LoRA init stream.
pub fn fresh_lora_set<T: Element>(
    model: &TransformerModel<T>,
    task: &str,
    adapters: &AdapterConfig,
    seed: u64,
) -> Result<AdapterSet<T>> {
    let mut rng = RngState::new(seed, streams::LORA_INIT);
    AdapterSet::fresh_lora(
        task,
        model,
        &adapters.lora_paths(model.blocks.len()),
        adapters.lora_rank,
        &mut rng,
    )
}

/// Builds the student's adapter set for the requested mechanisms.
pub fn calora_adapters<T: Element>(
    teacher: Option<&TransformerModel<T>>,
    student: &TransformerModel<T>,
    task: &str,
    adapters: &AdapterConfig,
    mechanisms: Mechanisms,
    seed: u64,
) -> Result<AdapterSet<T>> {
    let mut set = if mechanisms.inherit {
        let teacher_set = teacher.and_then(|t| t.adapter_set(task)).ok_or_else(|| {
            Error::config(format!(
                "inheritance needs a teacher with adapters for `{task}`"
            ))
        })?;
        inherit(teacher_set, student)?
    } else {
        fresh_lora_set(student, task, adapters, seed)?
    };
    if mechanisms.recover {
        let mut rng = RngState::new(seed, streams::RECOVERY_INIT);
        set.add_fresh_recovery(
            student,
            &adapters.recovery_paths(student.blocks.len()),
            adapters.recovery_rank,
            &mut rng,
        )?;
    }
    Ok(set)
}

/// Compression-aware tuning of a fresh or inherited LoRA set (plus
/// recovery adapters) on a frozen compressed model, optionally distilled
/// from the teacher. The teacher must carry its adapter set for `task`.
/// The trained set is left attached to `student`.
#[allow(clippy::too_many_arguments)]
pub fn train_calora<T: Element>(
    teacher: Option<&TransformerModel<T>>,
    student: &mut TransformerModel<T>,
    task: &str,
    data: &SyntheticCorpus,
    eval: &SyntheticCorpus,
    cfg: &TrainConfig,
    adapters: &AdapterConfig,
    mechanisms: Mechanisms,
) -> Result<RunRecord> {
    if mechanisms.distill && teacher.is_none() {
        return Err(Error::config("distillation needs a teacher model"));
    }
    if student.adapter_set(task).is_some() {
        return Err(Error::config(format!(
            "student already carries adapters for `{task}`"
        )));
    }
    let teacher_digest = teacher.map(|t| backbone_and_adapter_digest(t));
    let set = calora_adapters(teacher, student, task, adapters, mechanisms, cfg.seed)?;
    let provenance = set.provenance.to_string();
    student.attach_set(set)?;
    let trainable = student.param_count(true);
    let out = train_loop(
        student,
        data,
        eval,
        cfg,
        LoopSpec {
            teacher: if mechanisms.distill { teacher } else { None },
            alpha: cfg.alpha,
            frozen_backbone: true,
        },
    )?;
    if let (Some(t), Some(d)) = (teacher, teacher_digest) {
        if backbone_and_adapter_digest(t) != d {
            return Err(Error::Contract(
                "teacher changed during student training".into(),
            ));
        }
    }
    Ok(record(
        "calora", task, cfg, provenance, mechanisms, trainable, out,
    ))
}

/// Parameter-matched alternatives to recovery adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Fresh LoRA on the usual slots plus a second fresh LoRA of the same
    /// rank on every slot, trained with distillation.
    LoraPlusLora,
    /// One fresh LoRA of rank 32 on the usual slots, task loss only.
    LargeLora,
}

pub const LARGE_LORA_RANK: usize = 32;

impl Baseline {
    pub const ALL: [Baseline; 2] = [Baseline::LoraPlusLora, Baseline::LargeLora];

    pub fn label(self) -> &'static str {
        match self {
            Baseline::LoraPlusLora => "LoRA+LoRA",
            Baseline::LargeLora => "Large LoRA",
        }
    }
}

/// Trains a parameter-control baseline on a frozen compressed model. The
/// extra LoRA set of [`Baseline::LoraPlusLora`] is attached as
/// `<task>.extra`.
#[allow(clippy::too_many_arguments)]
pub fn train_baseline<T: Element>(
    teacher: Option<&TransformerModel<T>>,
    student: &mut TransformerModel<T>,
    task: &str,
    data: &SyntheticCorpus,
    eval: &SyntheticCorpus,
    cfg: &TrainConfig,
    adapters: &AdapterConfig,
    baseline: Baseline,
) -> Result<RunRecord> {
    let n_layers = student.blocks.len();
    let distill = match baseline {
        Baseline::LoraPlusLora => {
            let teacher =
                teacher.ok_or_else(|| Error::config("LoRA+LoRA distills from a teacher model"))?;
            let main = fresh_lora_set(student, task, adapters, cfg.seed)?;
            let mut rng = RngState::new(cfg.seed, streams::EXTRA_LORA_INIT);
            let extra = AdapterSet::fresh_lora(
                &format!("{task}.extra"),
                student,
                &SlotPath::grid(n_layers, &SlotKind::ALL),
                adapters.lora_rank,
                &mut rng,
            )?;
            student.attach_set(main)?;
            student.attach_set(extra)?;
            Some(teacher)
        }
        Baseline::LargeLora => {
            let large = AdapterConfig {
                lora_rank: LARGE_LORA_RANK,
                ..adapters.clone()
            };
            student.attach_set(fresh_lora_set(student, task, &large, cfg.seed)?)?;
            None
        }
    };
    let trainable = student.param_count(true);
    let out = train_loop(
        student,
        data,
        eval,
        cfg,
        LoopSpec {
            teacher: distill,
            alpha: cfg.alpha,
            frozen_backbone: true,
        },
    )?;
    let mechanisms = Mechanisms {
        distill: distill.is_some(),
        ..Mechanisms::NONE
    };
    Ok(record(
        baseline.label(),
        task,
        cfg,
        "scratch".into(),
        mechanisms,
        trainable,
        out,
    ))
}

fn backbone_and_adapter_digest<T: Element>(model: &TransformerModel<T>) -> String {
    let mut s = backbone_digest(model);
    for set in model.adapter_sets() {
        s.push_str(&set.checkpoint_id());
    }
    s
}
