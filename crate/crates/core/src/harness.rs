//! Experiment orchestration shared by the `calora` binary and the
//! acceptance tests: configuration, backbone pretraining, teacher tuning,
//! the mechanism ablation grid, convergence curves and storage accounting.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compression::{compress, CompressionReport, CompressionSpec, CompressionStep};
use crate::error::{Error, Result};
use crate::model::{RouterMode, TransformerConfig, TransformerModel};
use crate::tasks::{
    self, generate, pretrain_mixture, SampleCounts, Split, SyntheticCorpus, TaskKind, TaskSpec,
};
use crate::training::{
    fresh_lora_set, full_finetune, train_baseline, train_calora, train_lora,
    zero_shot_transfer_eval, AdapterConfig, Baseline, Mechanisms, RunRecord, TrainConfig,
};

pub type Model = TransformerModel<f32>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mixture_size: usize,
    /// Per-task mixture weights in task order; empty means uniform.
    pub weights: Vec<f64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 12_000,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.1,
            mixture_size: 40_000,
            weights: vec![1.0, 1.0, 1.0, 3.0, 3.0],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// Also run the parameter-matched LoRA+LoRA and Large LoRA baselines.
    pub baselines: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceConfig {
    pub families: Vec<String>,
    pub eval_interval: usize,
    /// Seeds for the curves; empty means the experiment seeds.
    pub seeds: Vec<u64>,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            families: ["q", "up", "sp", "m"].map(String::from).to_vec(),
            eval_interval: 250,
            seeds: Vec::new(),
        }
    }
}

/// Everything needed to reproduce a set of runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Downstream task id used by the ablation and convergence commands.
    pub task: String,
    /// Worker threads for independent runs (0 uses every core).
    pub workers: usize,
    pub model: TransformerConfig,
    pub tasks: Vec<TaskSpec>,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub adapters: AdapterConfig,
    pub compression: CompressionSpec,
    pub families: BTreeMap<String, CompressionSpec>,
    pub ablation: AblationConfig,
    pub convergence: ConvergenceConfig,
}

fn default_tasks() -> Vec<TaskSpec> {
    let counts = SampleCounts {
        pretrain: 0,
        train: 2000,
        eval: 100,
    };
    [
        (TaskKind::Copy, 2, 6),
        (TaskKind::Reverse, 2, 6),
        (TaskKind::Sort, 2, 6),
        (TaskKind::Parity, 2, 8),
        (TaskKind::ModAdd { p: 7 }, 2, 3),
    ]
    .into_iter()
    .map(|(kind, lo, hi)| TaskSpec::new(kind, lo, hi, counts, 7))
    .collect()
}

/// Named single-family pipelines plus their mixture.
pub fn default_families() -> BTreeMap<String, CompressionSpec> {
    let moefy = CompressionStep::Moefy {
        n_experts: 16,
        top_k: 4,
        router: RouterMode::Oracle,
    };
    let mut f = BTreeMap::new();
    f.insert(
        "q".into(),
        CompressionSpec::new(vec![CompressionStep::Quantize { bits: 8 }]),
    );
    f.insert(
        "up".into(),
        CompressionSpec::new(vec![CompressionStep::PruneUnstructured { sparsity: 0.5 }]),
    );
    f.insert(
        "sp".into(),
        CompressionSpec::new(vec![CompressionStep::PruneStructured {
            ffn_keep_fraction: 0.5,
            heads_keep_fraction: 0.5,
        }]),
    );
    f.insert("m".into(), CompressionSpec::new(vec![moefy.clone()]));
    f.insert(
        "mixture".into(),
        CompressionSpec::new(vec![
            moefy,
            CompressionStep::PruneUnstructured { sparsity: 0.5 },
            CompressionStep::Quantize { bits: 8 },
        ]),
    );
    f
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            seeds: vec![0, 1, 2, 3, 4],
            task: "modadd7".into(),
            workers: 0,
            model: TransformerConfig::default(),
            tasks: default_tasks(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig {
                eval_interval: 0,
                ..TrainConfig::default()
            },
            adapters: AdapterConfig::default(),
            compression: CompressionSpec::new(vec![
                CompressionStep::PruneUnstructured { sparsity: 0.5 },
                CompressionStep::Quantize { bits: 8 },
            ]),
            families: default_families(),
            ablation: AblationConfig::default(),
            convergence: ConvergenceConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.vocab_size != tasks::VOCAB_SIZE {
            return Err(Error::config(format!(
                "vocab_size must be {} for the task vocabulary",
                tasks::VOCAB_SIZE
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.tasks.is_empty() {
            return Err(Error::config("at least one task is required"));
        }
        for t in &self.tasks {
            t.validate()?;
            if t.max_len + 2 > self.model.max_seq_len {
                return Err(Error::config(format!(
                    "task `{}` needs {} positions, model has {}",
                    t.id,
                    t.max_len + 2,
                    self.model.max_seq_len
                )));
            }
        }
        let mut ids: Vec<&str> = self.tasks.iter().map(|t| t.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.tasks.len() {
            return Err(Error::config("task ids must be unique"));
        }
        self.task_spec(&self.task)?;
        if !self.pretrain.weights.is_empty() && self.pretrain.weights.len() != self.tasks.len() {
            return Err(Error::config("pretrain weights need one entry per task"));
        }
        self.train.validate()?;
        self.compression.validate()?;
        for (name, f) in &self.families {
            f.validate()
                .map_err(|e| Error::config(format!("family `{name}`: {e}")))?;
        }
        for name in &self.convergence.families {
            self.family(name)?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn task_spec(&self, id: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::config(format!("unknown task `{id}`")))
    }

    pub fn family(&self, name: &str) -> Result<&CompressionSpec> {
        self.families
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown compression family `{name}`")))
    }

    /// Train and eval splits of a downstream task.
    pub fn downstream(&self, id: &str) -> Result<(SyntheticCorpus, SyntheticCorpus)> {
        let spec = self.task_spec(id)?;
        Ok((generate(spec, Split::Train)?, generate(spec, Split::Eval)?))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    fn convergence_seeds(&self) -> &[u64] {
        if self.convergence.seeds.is_empty() {
            &self.seeds
        } else {
            &self.convergence.seeds
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Internal(e.to_string()))
    }
}

/// Prefixed evaluation splits of every task, concatenated.
pub fn mixture_eval(cfg: &ExperimentConfig) -> Result<SyntheticCorpus> {
    let mut samples = Vec::new();
    for spec in &cfg.tasks {
        let spec = TaskSpec {
            prefixed: true,
            ..spec.clone()
        };
        samples.extend(generate(&spec, Split::Eval)?.samples);
    }
    Ok(SyntheticCorpus {
        task_id: "mixture".into(),
        split: Split::Eval,
        samples,
    })
}

/// Full training of a fresh backbone on the prefixed task mixture. The
/// returned backbone is frozen.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<(Model, RunRecord)> {
    let p = &cfg.pretrain;
    let weights = if p.weights.is_empty() {
        vec![1.0; cfg.tasks.len()]
    } else {
        p.weights.clone()
    };
    let mixture = pretrain_mixture(&cfg.tasks, &weights, p.mixture_size)?;
    let eval = mixture_eval(cfg)?;
    let mut model = Model::new(cfg.model.clone(), p.seed)?;
    let train = TrainConfig {
        lr: p.lr,
        batch_size: p.batch_size,
        max_steps: p.steps,
        weight_decay: p.weight_decay,
        seed: p.seed,
        eval_interval: 0,
        ..TrainConfig::default()
    };
    let mut record = full_finetune(&mut model, &mixture, &eval, &train)?;
    record.config_hash = cfg.hash();
    model.freeze_backbone();
    Ok((model, record))
}

/// LoRA tuning of the uncompressed backbone. The returned teacher carries
/// its frozen adapter set for `task`.
pub fn train_teacher(
    cfg: &ExperimentConfig,
    backbone: &Model,
    task: &str,
    seed: u64,
) -> Result<(Model, RunRecord)> {
    let (train, eval) = cfg.downstream(task)?;
    let mut teacher = backbone.clone();
    teacher.detach_all();
    teacher.freeze_backbone();
    teacher.attach_set(fresh_lora_set(&teacher, task, &cfg.adapters, seed)?)?;
    let mut record = train_lora(&mut teacher, &train, &eval, &cfg.train_config(seed))?;
    record.kind = "teacher-lora".into();
    record.config_hash = cfg.hash();
    if let Some(set) = teacher.adapter_set_mut(task) {
        set.set_trainable(false);
    }
    Ok((teacher, record))
}

/// Adapter-free compressed copy of a model's backbone.
pub fn compress_backbone(
    model: &Model,
    spec: &CompressionSpec,
) -> Result<(Model, CompressionReport)> {
    let mut m = model.clone();
    m.detach_all();
    let report = compress(&mut m, spec)?;
    Ok((m, report))
}

/// Accuracy of the teacher's LoRA copied onto the compressed model with no
/// further training.
pub fn inherit_eval(
    teacher: &Model,
    compressed: &Model,
    task: &str,
    eval: &SyntheticCorpus,
) -> Result<f64> {
    let set = teacher
        .adapter_set(task)
        .ok_or_else(|| Error::config(format!("teacher has no adapters for `{task}`")))?;
    zero_shot_transfer_eval(set, compressed, eval)
}

/// One trainable configuration on the compressed model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cell {
    Calora(Mechanisms),
    Baseline(Baseline),
}

impl Cell {
    pub fn label(&self) -> String {
        match self {
            Cell::Calora(m) => m.label(),
            Cell::Baseline(b) => b.label().to_string(),
        }
    }
}

pub fn run_cell(
    cfg: &ExperimentConfig,
    teacher: &Model,
    compressed: &Model,
    task: &str,
    cell: Cell,
    seed: u64,
) -> Result<RunRecord> {
    let (train, eval) = cfg.downstream(task)?;
    run_cell_on(cfg, teacher, compressed, task, cell, seed, &train, &eval)
}

#[allow(clippy::too_many_arguments)]
fn run_cell_on(
    cfg: &ExperimentConfig,
    teacher: &Model,
    compressed: &Model,
    task: &str,
    cell: Cell,
    seed: u64,
    train: &SyntheticCorpus,
    eval: &SyntheticCorpus,
) -> Result<RunRecord> {
    let mut student = compressed.clone();
    student.detach_all();
    student.freeze_backbone();
    let tc = cfg.train_config(seed);
    let mut record = match cell {
        Cell::Calora(m) => train_calora(
            Some(teacher),
            &mut student,
            task,
            train,
            eval,
            &tc,
            &cfg.adapters,
            m,
        )?,
        Cell::Baseline(b) => train_baseline(
            Some(teacher),
            &mut student,
            task,
            train,
            eval,
            &tc,
            &cfg.adapters,
            b,
        )?,
    };
    record.config_hash = cfg.hash();
    Ok(record)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub cell: Cell,
    pub seeds: Vec<u64>,
    /// Final metric per seed; `None` where the run failed.
    pub metrics: Vec<Option<f64>>,
    pub errors: Vec<Option<String>>,
    pub median: Option<f64>,
}

impl CellResult {
    fn new(cell: Cell, seeds: &[u64], outcomes: Vec<std::result::Result<f64, String>>) -> Self {
        let metrics: Vec<Option<f64>> = outcomes.iter().map(|o| o.as_ref().ok().copied()).collect();
        let ok: Vec<f64> = metrics.iter().flatten().copied().collect();
        Self {
            label: cell.label(),
            cell,
            seeds: seeds.to_vec(),
            errors: outcomes.into_iter().map(|o| o.err()).collect(),
            median: median(&ok),
            metrics,
        }
    }

    pub fn failed(&self) -> bool {
        self.errors.iter().any(Option::is_some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub task: String,
    pub config_hash: String,
    pub cells: Vec<CellResult>,
    pub baselines: Vec<CellResult>,
    pub records: Vec<RunRecord>,
}

impl AblationReport {
    pub fn cell(&self, m: Mechanisms) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.cell == Cell::Calora(m))
    }

    pub fn markdown(&self) -> String {
        let fmt = |c: &CellResult| match c.median {
            Some(m) if !c.failed() => format!("{:.1}", 100.0 * m),
            Some(m) => format!("{:.1} (partial)", 100.0 * m),
            None => "failed".to_string(),
        };
        let tick = |b: bool| if b { "✓" } else { " " };
        let mut s = format!("| Inherit | Recover | Distill | {} Acc |\n", self.task);
        s.push_str("|:-:|:-:|:-:|:-:|\n");
        for c in &self.cells {
            if let Cell::Calora(m) = c.cell {
                s.push_str(&format!(
                    "| {} | {} | {} | {} |\n",
                    tick(m.inherit),
                    tick(m.recover),
                    tick(m.distill),
                    fmt(c)
                ));
            }
        }
        if !self.baselines.is_empty() {
            s.push_str(&format!("\n| Method | {} Acc |\n|:-|:-:|\n", self.task));
            let none = self.cell(Mechanisms::NONE);
            let all = self.cell(Mechanisms::ALL);
            let rows = none
                .map(|c| ("LoRA", c))
                .into_iter()
                .chain(self.baselines.iter().map(|c| (c.label.as_str(), c)))
                .chain(all.map(|c| ("CA-LoRA", c)));
            for (name, c) in rows {
                s.push_str(&format!("| {name} | {} |\n", fmt(c)));
            }
        }
        s
    }
}

/// Trains every mechanism combination (and optionally the baselines) for
/// every seed. Failed runs are reported per cell; completed ones are kept.
pub fn ablate(
    cfg: &ExperimentConfig,
    teacher: &Model,
    compressed: &Model,
    task: &str,
) -> Result<AblationReport> {
    let (train, eval) = cfg.downstream(task)?;
    let mut cells: Vec<Cell> = Mechanisms::grid().into_iter().map(Cell::Calora).collect();
    if cfg.ablation.baselines {
        cells.extend(Baseline::ALL.map(Cell::Baseline));
    }
    let jobs: Vec<(Cell, u64)> = cells
        .iter()
        .flat_map(|&c| cfg.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let outcomes: Vec<Result<RunRecord>> = cfg.pool()?.install(|| {
        jobs.par_iter()
            .map(|&(cell, seed)| {
                run_cell_on(cfg, teacher, compressed, task, cell, seed, &train, &eval)
            })
            .collect()
    });
    let mut records = Vec::new();
    let mut results = Vec::new();
    let mut outcomes = outcomes.into_iter();
    for &cell in &cells {
        let per_seed: Vec<std::result::Result<f64, String>> = cfg
            .seeds
            .iter()
            .map(|_| match outcomes.next().expect("one outcome per job") {
                Ok(r) => {
                    let m = r.final_metric;
                    records.push(r);
                    Ok(m)
                }
                Err(e) => Err(e.to_string()),
            })
            .collect();
        results.push(CellResult::new(cell, &cfg.seeds, per_seed));
    }
    let baselines = results.split_off(8);
    Ok(AblationReport {
        task: task.to_string(),
        config_hash: cfg.hash(),
        cells: results,
        baselines,
        records,
    })
}

/// Curve methods: fresh LoRA, inherited LoRA without recovery or
/// distillation, and every mechanism.
pub const CURVE_METHODS: [(&str, Mechanisms); 3] = [
    ("vanilla", Mechanisms::NONE),
    (
        "inherited",
        Mechanisms {
            inherit: true,
            recover: false,
            distill: false,
        },
    ),
    ("calora", Mechanisms::ALL),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub family: String,
    pub method: String,
    pub seed: u64,
    pub step: usize,
    pub metric: f64,
}

/// Eval-metric-versus-step curves for each compressed family, method and
/// seed, all with the same budget.
pub fn convergence(
    cfg: &ExperimentConfig,
    teacher: &Model,
    families: &[(String, Model)],
    task: &str,
) -> Result<Vec<CurveRow>> {
    if cfg.convergence.eval_interval == 0 {
        return Err(Error::config("convergence needs a positive eval_interval"));
    }
    let (train, eval) = cfg.downstream(task)?;
    let mut jobs = Vec::new();
    for (fi, (name, _)) in families.iter().enumerate() {
        for (method, mech) in CURVE_METHODS {
            for &seed in cfg.convergence_seeds() {
                jobs.push((fi, name.clone(), method, mech, seed));
            }
        }
    }
    let runs: Vec<Result<Vec<CurveRow>>> = cfg.pool()?.install(|| {
        jobs.par_iter()
            .map(|(fi, name, method, mech, seed)| {
                let mut student = families[*fi].1.clone();
                student.detach_all();
                student.freeze_backbone();
                let tc = TrainConfig {
                    eval_interval: cfg.convergence.eval_interval,
                    ..cfg.train_config(*seed)
                };
                let r = train_calora(
                    Some(teacher),
                    &mut student,
                    task,
                    &train,
                    &eval,
                    &tc,
                    &cfg.adapters,
                    *mech,
                )?;
                Ok(r.curve
                    .iter()
                    .map(|p| CurveRow {
                        family: name.clone(),
                        method: method.to_string(),
                        seed: *seed,
                        step: p.step,
                        metric: p.metric,
                    })
                    .collect())
            })
            .collect()
    });
    let mut rows = Vec::new();
    for r in runs {
        rows.extend(r?);
    }
    Ok(rows)
}

pub fn write_curves_csv<W: Write>(mut w: W, rows: &[CurveRow]) -> Result<()> {
    writeln!(w, "family,method,seed,step,metric")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.family, r.method, r.seed, r.step, r.metric
        )?;
    }
    Ok(())
}

pub fn read_curves_csv<R: BufRead>(r: R) -> Result<Vec<CurveRow>> {
    let mut lines = r.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim_end() == "family,method,seed,step,metric" => {}
        _ => return Err(Error::Format("missing curves CSV header".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("curves CSV line {}: `{line}`", i + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        rows.push(CurveRow {
            family: f[0].to_string(),
            method: f[1].to_string(),
            seed: f[2].parse().map_err(|_| bad())?,
            step: f[3].parse().map_err(|_| bad())?,
            metric: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

/// Curve for one (family, method, seed), ordered by step.
pub fn curve<'a>(rows: &'a [CurveRow], family: &str, method: &str, seed: u64) -> Vec<&'a CurveRow> {
    let mut c: Vec<&CurveRow> = rows
        .iter()
        .filter(|r| r.family == family && r.method == method && r.seed == seed)
        .collect();
    c.sort_by_key(|r| r.step);
    c
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyBytes {
    pub strategy: String,
    pub total_bytes: u64,
    pub per_task_bytes: u64,
}

/// Deployment cost of serving `n_tasks` tasks under each strategy, from
/// serialized file sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageReport {
    pub n_tasks: u64,
    pub backbone_bytes: u64,
    pub compressed_bytes: u64,
    pub lora_bytes: u64,
    pub calora_bytes: u64,
    pub strategies: Vec<StrategyBytes>,
}

pub const FULL_FT: &str = "n×full-FT";
pub const BACKBONE_LORA: &str = "backbone+n×LoRA";
pub const COMPRESSED_CALORA: &str = "compressed+n×CA-LoRA";

impl StorageReport {
    pub fn from_sizes(
        backbone: u64,
        compressed: u64,
        lora: u64,
        calora: u64,
        n_tasks: u64,
    ) -> Self {
        let strategies = vec![
            StrategyBytes {
                strategy: FULL_FT.into(),
                total_bytes: n_tasks.max(1) * backbone,
                per_task_bytes: backbone,
            },
            StrategyBytes {
                strategy: BACKBONE_LORA.into(),
                total_bytes: backbone + n_tasks * lora,
                per_task_bytes: lora,
            },
            StrategyBytes {
                strategy: COMPRESSED_CALORA.into(),
                total_bytes: compressed + n_tasks * calora,
                per_task_bytes: calora,
            },
        ];
        Self {
            n_tasks,
            backbone_bytes: backbone,
            compressed_bytes: compressed,
            lora_bytes: lora,
            calora_bytes: calora,
            strategies,
        }
    }

    pub fn from_files(
        backbone: &Path,
        compressed: &Path,
        lora: &Path,
        calora: &Path,
        n_tasks: u64,
    ) -> Result<Self> {
        let size = |p: &Path| -> Result<u64> { Ok(std::fs::metadata(p)?.len()) };
        Ok(Self::from_sizes(
            size(backbone)?,
            size(compressed)?,
            size(lora)?,
            size(calora)?,
            n_tasks,
        ))
    }

    pub fn strategy(&self, name: &str) -> Option<&StrategyBytes> {
        self.strategies.iter().find(|s| s.strategy == name)
    }

    pub fn markdown(&self) -> String {
        let mut s = format!(
            "| Strategy ({} tasks) | Total bytes | Per-task bytes |\n|:-|-:|-:|\n",
            self.n_tasks
        );
        for st in &self.strategies {
            s.push_str(&format!(
                "| {} | {} | {} |\n",
                st.strategy, st.total_bytes, st.per_task_bytes
            ));
        }
        s
    }
}

/// Output directory with an append-only `runs.jsonl` index.
pub struct RunStore {
    dir: PathBuf,
}

pub const RUNS_INDEX: &str = "runs.jsonl";

impl RunStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes `<name>.json` and appends the record to the index.
    pub fn save(&self, name: &str, record: &RunRecord) -> Result<PathBuf> {
        let path = self.dir.join(format!("{name}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(record)?)?;
        let mut index = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join(RUNS_INDEX))?;
        writeln!(index, "{}", serde_json::to_string(record)?)?;
        Ok(path)
    }

    pub fn index(&self) -> Result<Vec<RunRecord>> {
        let path = self.dir.join(RUNS_INDEX);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for line in BufReader::new(std::fs::File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_survives_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.train.alpha = 0.1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_task_is_a_config_error() {
        let cfg = ExperimentConfig {
            task: "nope".into(),
            ..ExperimentConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn storage_with_no_tasks_is_backbone_only() {
        let r = StorageReport::from_sizes(1000, 300, 40, 90, 0);
        assert_eq!(r.strategy(FULL_FT).unwrap().total_bytes, 1000);
        assert_eq!(r.strategy(BACKBONE_LORA).unwrap().total_bytes, 1000);
        assert_eq!(r.strategy(COMPRESSED_CALORA).unwrap().total_bytes, 300);
    }
}
