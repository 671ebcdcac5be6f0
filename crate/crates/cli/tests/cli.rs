use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use calora_core::compression::CompressionSpec;
use calora_core::harness::{read_curves_csv, ExperimentConfig, Model, COMPRESSED_CALORA, FULL_FT};
use calora_core::tasks::SampleCounts;
use calora_core::training::{fresh_lora_set, train_lora, RunRecord};
use serde_json::Value;

fn small_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = out.to_path_buf();
    cfg.seeds = vec![0, 1];
    cfg.workers = 1;
    cfg.model.d_model = 16;
    cfg.model.n_heads = 2;
    cfg.model.d_ff = 32;
    cfg.model.max_seq_len = 10;
    for t in &mut cfg.tasks {
        t.counts = SampleCounts {
            pretrain: 0,
            train: 120,
            eval: 20,
        };
    }
    cfg.pretrain.steps = 20;
    cfg.pretrain.batch_size = 8;
    cfg.pretrain.mixture_size = 300;
    cfg.train.max_steps = 10;
    cfg.train.batch_size = 8;
    cfg.adapters.lora_rank = 2;
    cfg.adapters.recovery_rank = 2;
    cfg.families
        .insert("none".into(), CompressionSpec::new(Vec::new()));
    cfg.convergence.families = vec!["q".into(), "m".into()];
    cfg.convergence.eval_interval = 5;
    cfg
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("config.toml");
        std::fs::write(&config, small_config(&root.join("out")).to_toml().unwrap()).unwrap();
        Self {
            _dir: dir,
            root,
            config,
        }
    }

    fn out(&self) -> PathBuf {
        self.root.join("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_calora"));
        cmd.args(args);
        let with_config = !matches!(args.first(), Some(&"storage-report"));
        if with_config {
            cmd.arg("--config").arg(&self.config);
        }
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Value {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let stdout = String::from_utf8(out.stdout).unwrap();
        serde_json::from_str(stdout.lines().last().unwrap_or("null")).unwrap_or(Value::Null)
    }

    fn path(&self, name: &str) -> String {
        self.out().join(name).to_string_lossy().into_owned()
    }

    /// Backbone, teacher and compressed checkpoints.
    fn prepare(&self) {
        self.ok(&["pretrain"]);
        let backbone = self.path("backbone.calr");
        self.ok(&["train-teacher-lora", "--backbone", &backbone]);
        self.ok(&["compress", "--checkpoint", &self.path("teacher.calr")]);
    }
}

#[test]
fn invalid_config_exits_with_config_code() {
    let ws = Workspace::new();
    let mut cfg = small_config(&ws.out());
    cfg.model.n_heads = 3;
    let bad = ws.root.join("bad.toml");
    std::fs::write(&bad, cfg.to_toml().unwrap()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_calora"))
        .args(["pretrain", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(&bad, "seeds = \"not a list\"").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_calora"))
        .args(["pretrain", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_and_missing_checkpoints_exit_with_io_code() {
    let ws = Workspace::new();
    ws.ok(&["pretrain"]);
    let path = ws.out().join("backbone.calr");
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let corrupt = ws.root.join("corrupt.calr");
    std::fs::write(&corrupt, bytes).unwrap();
    let out = ws.run(&["eval", "--checkpoint", corrupt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
    let out = ws.run(&["eval", "--checkpoint", "/nonexistent/x.calr"]);
    assert_eq!(out.status.code(), Some(6));
}

#[test]
fn pipeline_commands_compose() {
    let ws = Workspace::new();
    ws.prepare();
    let cfg = ExperimentConfig::load(&ws.config).unwrap();
    let (teacher, compressed) = (ws.path("teacher.calr"), ws.path("compressed.calr"));

    // Pretraining is reproducible bitwise.
    let first = std::fs::read(ws.out().join("backbone.calr")).unwrap();
    let other = ws.root.join("again");
    ws.ok(&["pretrain", "--out", other.to_str().unwrap()]);
    assert_eq!(first, std::fs::read(other.join("backbone.calr")).unwrap());

    // Eval is deterministic across invocations.
    let a = ws.ok(&["eval", "--checkpoint", &teacher]);
    assert_eq!(a, ws.ok(&["eval", "--checkpoint", &teacher]));

    // An empty compression spec leaves the metric unchanged.
    let none = ws.ok(&[
        "compress",
        "--checkpoint",
        &ws.path("backbone.calr"),
        "--family",
        "none",
    ]);
    assert_eq!(none["size_ratio"].as_f64(), Some(1.0));
    let before = ws.ok(&["eval", "--checkpoint", &ws.path("backbone.calr")]);
    let after = ws.ok(&["eval", "--checkpoint", &ws.path("compressed-none.calr")]);
    assert_eq!(before["metric"], after["metric"]);

    let inherited = ws.ok(&[
        "inherit-eval",
        "--teacher",
        &teacher,
        "--compressed",
        &compressed,
    ]);
    assert!(inherited["metric"].as_f64().unwrap() >= 0.0);

    // Every mechanism off reproduces plain LoRA on the compressed model.
    let r = ws.ok(&[
        "train-calora",
        "--teacher",
        &teacher,
        "--compressed",
        &compressed,
        "--seed",
        "3",
        "--no-inherit",
        "--no-recover",
        "--no-distill",
    ]);
    let task = cfg.task.clone();
    let (train, eval) = cfg.downstream(&task).unwrap();
    let mut student = Model::load(Path::new(&compressed)).unwrap();
    student.detach_all();
    student.freeze_backbone();
    student
        .attach_set(fresh_lora_set(&student, &task, &cfg.adapters, 3).unwrap())
        .unwrap();
    let plain = train_lora(&mut student, &train, &eval, &cfg.train_config(3)).unwrap();
    assert_eq!(
        r["metric"].as_f64().unwrap().to_bits(),
        plain.final_metric.to_bits()
    );
    let saved: RunRecord = serde_json::from_str(
        &std::fs::read_to_string(ws.out().join(format!("calora-{task}-none-s3.json"))).unwrap(),
    )
    .unwrap();
    let bits =
        |r: &RunRecord| -> Vec<u64> { r.losses.iter().map(|l| l.task_loss.to_bits()).collect() };
    assert_eq!(bits(&saved), bits(&plain));
    assert!(ws.out().join(format!("calora-{task}-none-s3.csv")).exists());

    // Runs are indexed.
    let index = std::fs::read_to_string(ws.out().join("runs.jsonl")).unwrap();
    assert!(index.lines().count() >= 3);
}

#[test]
fn ablation_and_convergence_outputs() {
    let ws = Workspace::new();
    ws.prepare();
    let cfg = ExperimentConfig::load(&ws.config).unwrap();
    let teacher = ws.path("teacher.calr");
    let out = ws.run(&[
        "ablate",
        "--teacher",
        &teacher,
        "--compressed",
        &ws.path("compressed.calr"),
        "--seed",
        "0",
        "--baselines",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let md = std::fs::read_to_string(ws.out().join("ablation.md")).unwrap();
    let grid: Vec<&str> = md.lines().take_while(|l| !l.is_empty()).skip(2).collect();
    assert_eq!(grid.len(), 8);
    assert!(grid[0].starts_with("|   |   |   |"));
    assert!(grid[7].starts_with("| ✓ | ✓ | ✓ |"));
    assert!(md.contains("LoRA+LoRA") && md.contains("Large LoRA"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("| Inherit | Recover | Distill |"));

    ws.ok(&[
        "convergence",
        "--teacher",
        &teacher,
        "--seed",
        "0",
        "--seed",
        "1",
    ]);
    let csv = std::fs::read(ws.out().join("curves.csv")).unwrap();
    let rows = read_curves_csv(csv.as_slice()).unwrap();
    let per_curve = cfg.train.max_steps / cfg.convergence.eval_interval + 1;
    assert_eq!(rows.len(), 2 * 3 * 2 * per_curve);
    assert!(rows.iter().filter(|r| r.step == 0).count() == 2 * 3 * 2);
    let mut again = Vec::new();
    calora_core::harness::write_curves_csv(&mut again, &rows).unwrap();
    assert_eq!(again, csv);
}

#[test]
fn storage_report_counts_file_bytes() {
    let ws = Workspace::new();
    ws.prepare();
    let cfg = ExperimentConfig::load(&ws.config).unwrap();
    let teacher = Model::load(&ws.out().join("teacher.calr")).unwrap();
    let compressed = Model::load(&ws.out().join("compressed.calr")).unwrap();
    let set = calora_core::training::calora_adapters(
        Some(&teacher),
        &compressed,
        &cfg.task,
        &cfg.adapters,
        calora_core::training::Mechanisms::ALL,
        0,
    )
    .unwrap();
    let calora = ws.out().join("calora.calr");
    set.save(&calora).unwrap();
    let lora = ws.path(&format!("lora-{}.calr", cfg.task));
    let size = |p: &str| std::fs::metadata(p).unwrap().len();
    for n in [0u64, 5] {
        let report_dir = ws.root.join(format!("report{n}"));
        let r = ws.ok(&[
            "storage-report",
            "--backbone",
            &ws.path("backbone.calr"),
            "--compressed",
            &ws.path("compressed.calr"),
            "--lora",
            &lora,
            "--calora",
            calora.to_str().unwrap(),
            "--n-tasks",
            &n.to_string(),
            "--out",
            report_dir.to_str().unwrap(),
        ]);
        let strategy = |name: &str| {
            r["strategies"]
                .as_array()
                .unwrap()
                .iter()
                .find(|s| s["strategy"] == name)
                .unwrap()
                .clone()
        };
        assert_eq!(
            strategy("backbone+n×LoRA")["total_bytes"].as_u64().unwrap(),
            size(&ws.path("backbone.calr")) + n * size(&lora)
        );
        assert_eq!(
            strategy(COMPRESSED_CALORA)["total_bytes"].as_u64().unwrap(),
            size(&ws.path("compressed.calr")) + n * size(calora.to_str().unwrap())
        );
        assert!(strategy(FULL_FT)["total_bytes"].as_u64().unwrap() > 0);
        assert!(report_dir.join("storage.json").exists());
        assert!(report_dir.join("storage.md").exists());
    }
    let out = ws.run(&[
        "storage-report",
        "--backbone",
        "/nonexistent.calr",
        "--compressed",
        &ws.path("compressed.calr"),
        "--lora",
        &lora,
        "--calora",
        calora.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(6));
}
