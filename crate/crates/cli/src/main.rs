use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use calora_core::adapters::AdapterSet;
use calora_core::harness::{
    self, compress_backbone, convergence, inherit_eval, pretrain, run_cell, train_teacher,
    write_curves_csv, Cell, ExperimentConfig, Model, RunStore, StorageReport,
};
use calora_core::training::{evaluate, write_loss_csv, Mechanisms, RunRecord};
use calora_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "calora",
    version,
    about = "Compression-aware LoRA experiments on a tiny transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, RunStore)> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let out = self.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
        let store = RunStore::open(out)?;
        Ok((cfg, store))
    }
}

#[derive(Args)]
struct MechanismFlags {
    #[arg(long, overrides_with = "no_inherit")]
    inherit: bool,
    #[arg(long)]
    no_inherit: bool,
    #[arg(long, overrides_with = "no_recover")]
    recover: bool,
    #[arg(long)]
    no_recover: bool,
    #[arg(long, overrides_with = "no_distill")]
    distill: bool,
    #[arg(long)]
    no_distill: bool,
}

impl MechanismFlags {
    fn mechanisms(&self) -> Mechanisms {
        Mechanisms {
            inherit: !self.no_inherit,
            recover: !self.no_recover,
            distill: !self.no_distill,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a backbone on the prefixed task mixture.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tune a LoRA teacher on the uncompressed backbone.
    TrainTeacherLora {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compress a checkpoint's backbone.
    Compress {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Named family from the config instead of its `compression` spec.
        #[arg(long)]
        family: Option<String>,
    },
    /// Accuracy of the teacher's LoRA copied onto the compressed model.
    InheritEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        compressed: PathBuf,
        #[arg(long)]
        task: Option<String>,
    },
    /// Tune adapters on the compressed model.
    TrainCalora {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        compressed: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        mechanisms: MechanismFlags,
    },
    /// Evaluate a checkpoint, with its attached adapters, on a task.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Option<String>,
    },
    /// Run every inherit/recover/distill combination over the seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        /// Compressed checkpoint; compresses the teacher's backbone when omitted.
        #[arg(long)]
        compressed: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
        /// Replaces the config's seed list.
        #[arg(long)]
        seed: Vec<u64>,
        /// Include the LoRA+LoRA and Large LoRA baselines.
        #[arg(long)]
        baselines: bool,
    },
    /// Metric-versus-step curves per compression family.
    Convergence {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        seed: Vec<u64>,
    },
    /// Byte accounting for serving several tasks.
    StorageReport {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        compressed: PathBuf,
        #[arg(long)]
        lora: PathBuf,
        #[arg(long)]
        calora: PathBuf,
        #[arg(long, default_value_t = 5)]
        n_tasks: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn save_run(store: &RunStore, name: &str, record: &RunRecord) -> Result<()> {
    store.save(name, record)?;
    let csv = BufWriter::new(File::create(store.dir().join(format!("{name}.csv")))?);
    write_loss_csv(csv, &record.losses)
}

fn print_json(value: serde_json::Value) {
    println!("{value}");
}

fn task_or_default(cfg: &ExperimentConfig, task: &Option<String>) -> String {
    task.clone().unwrap_or_else(|| cfg.task.clone())
}

fn load_compressed_or_derive(
    cfg: &ExperimentConfig,
    teacher: &Model,
    compressed: Option<&Path>,
) -> Result<Model> {
    match compressed {
        Some(p) => Model::load(p),
        None => Ok(compress_backbone(teacher, &cfg.compression)?.0),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, seed } => {
            let (mut cfg, store) = common.load()?;
            if let Some(s) = seed {
                cfg.pretrain.seed = s;
            }
            let (model, record) = pretrain(&cfg)?;
            let path = store.dir().join("backbone.calr");
            model.save(&path)?;
            save_run(&store, "pretrain", &record)?;
            print_json(serde_json::json!({
                "checkpoint": path,
                "mixture_metric": record.final_metric,
                "config_hash": record.config_hash,
            }));
        }
        Command::TrainTeacherLora {
            common,
            backbone,
            task,
            seed,
        } => {
            let (cfg, store) = common.load()?;
            let task = task_or_default(&cfg, &task);
            let backbone = Model::load(&backbone)?;
            let (teacher, record) = train_teacher(&cfg, &backbone, &task, seed)?;
            let path = store.dir().join("teacher.calr");
            teacher.save(&path)?;
            let set = teacher
                .adapter_set(&task)
                .expect("teacher carries its adapters");
            set.save(&store.dir().join(format!("lora-{task}.calr")))?;
            save_run(&store, &format!("teacher-{task}-s{seed}"), &record)?;
            print_json(serde_json::json!({
                "checkpoint": path,
                "task": task,
                "metric": record.final_metric,
            }));
        }
        Command::Compress {
            common,
            checkpoint,
            family,
        } => {
            let (cfg, store) = common.load()?;
            let spec = match &family {
                Some(f) => cfg.family(f)?.clone(),
                None => cfg.compression.clone(),
            };
            let model = Model::load(&checkpoint)?;
            let (compressed, report) = compress_backbone(&model, &spec)?;
            let name = match &family {
                Some(f) => format!("compressed-{f}"),
                None => "compressed".to_string(),
            };
            let path = store.dir().join(format!("{name}.calr"));
            compressed.save(&path)?;
            std::fs::write(
                store.dir().join(format!("{name}.json")),
                serde_json::to_string_pretty(&report)?,
            )?;
            print_json(serde_json::json!({
                "checkpoint": path,
                "size_ratio": report.size_ratio(),
                "mac_fraction": report.mac_fraction(),
                "ideal_speedup": report.ideal_speedup(),
            }));
        }
        Command::InheritEval {
            common,
            teacher,
            compressed,
            task,
        } => {
            let (cfg, _) = common.load()?;
            let task = task_or_default(&cfg, &task);
            let (_, eval) = cfg.downstream(&task)?;
            let metric = inherit_eval(
                &Model::load(&teacher)?,
                &Model::load(&compressed)?,
                &task,
                &eval,
            )?;
            print_json(serde_json::json!({ "task": task, "metric": metric }));
        }
        Command::TrainCalora {
            common,
            teacher,
            compressed,
            task,
            seed,
            mechanisms,
        } => {
            let (cfg, store) = common.load()?;
            let task = task_or_default(&cfg, &task);
            let teacher = Model::load(&teacher)?;
            let compressed = Model::load(&compressed)?;
            let m = mechanisms.mechanisms();
            let record = run_cell(&cfg, &teacher, &compressed, &task, Cell::Calora(m), seed)?;
            save_run(
                &store,
                &format!("calora-{task}-{}-s{seed}", m.label()),
                &record,
            )?;
            print_json(serde_json::json!({
                "task": task,
                "mechanisms": m,
                "metric": record.final_metric,
            }));
        }
        Command::Eval {
            common,
            checkpoint,
            task,
        } => {
            let (cfg, _) = common.load()?;
            let task = task_or_default(&cfg, &task);
            let (_, eval) = cfg.downstream(&task)?;
            let metric = evaluate(&Model::load(&checkpoint)?, &eval)?;
            print_json(serde_json::json!({ "task": task, "metric": metric }));
        }
        Command::Ablate {
            common,
            teacher,
            compressed,
            task,
            seed,
            baselines,
        } => {
            let (mut cfg, store) = common.load()?;
            if !seed.is_empty() {
                cfg.seeds = seed;
            }
            cfg.ablation.baselines |= baselines;
            let task = task_or_default(&cfg, &task);
            let teacher = Model::load(&teacher)?;
            let compressed = load_compressed_or_derive(&cfg, &teacher, compressed.as_deref())?;
            let report = harness::ablate(&cfg, &teacher, &compressed, &task)?;
            for r in &report.records {
                store.save(&format!("ablate-{}-{}-s{}", task, r.label(), r.seed), r)?;
            }
            std::fs::write(store.dir().join("ablation.md"), report.markdown())?;
            std::fs::write(
                store.dir().join("ablation.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            print!("{}", report.markdown());
        }
        Command::Convergence {
            common,
            teacher,
            task,
            seed,
        } => {
            let (mut cfg, store) = common.load()?;
            if !seed.is_empty() {
                cfg.convergence.seeds = seed;
            }
            let task = task_or_default(&cfg, &task);
            let teacher = Model::load(&teacher)?;
            let mut families = Vec::new();
            for name in &cfg.convergence.families {
                families.push((
                    name.clone(),
                    compress_backbone(&teacher, cfg.family(name)?)?.0,
                ));
            }
            let rows = convergence(&cfg, &teacher, &families, &task)?;
            let path = store.dir().join("curves.csv");
            write_curves_csv(BufWriter::new(File::create(&path)?), &rows)?;
            print_json(serde_json::json!({ "curves": path, "rows": rows.len() }));
        }
        Command::StorageReport {
            backbone,
            compressed,
            lora,
            calora,
            n_tasks,
            out,
        } => {
            for p in [&backbone, &compressed, &lora, &calora] {
                calora_core::model::read_file(p)?;
            }
            AdapterSet::<f32>::load(&lora)?;
            AdapterSet::<f32>::load(&calora)?;
            let report =
                StorageReport::from_files(&backbone, &compressed, &lora, &calora, n_tasks)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(
                    dir.join("storage.json"),
                    serde_json::to_string_pretty(&report)?,
                )?;
                std::fs::write(dir.join("storage.md"), report.markdown())?;
            }
            print_json(serde_json::to_value(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
