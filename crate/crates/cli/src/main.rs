//! `any2point` command-line tool.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 I/O, 5 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use any2point::ablation::{build_table, run_ablation, TableKind};
use any2point::dataset::{read_benchmark, write_benchmark, BenchmarkSpec, Dataset};
use any2point::inspect::{inspect, write_label_csv, write_score_csv};
use any2point::io::{read_cloud, write_pe_table};
use any2point::model::{build_backbone, Model, TrainConfig};
use any2point::shapes::ShapeKind;
use any2point::train::{checkpoint_config, evaluate, load_trainables, param_report_for, save_trainables, train_with_progress};
use any2point::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "any2point", version, about = "Point-cloud classification with frozen 1D/2D transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural shape benchmark as A2PC files plus an index.
    GenData(GenDataArgs),
    /// Train tokenizer, adapters and head; writes metrics and a checkpoint.
    Train(TrainArgs),
    /// Print the test accuracy of a trained checkpoint.
    Eval(EvalArgs),
    /// Run ablation tables and write one CSV per table.
    Ablate(AblateArgs),
    /// Dump cls attention and similarity clusters per token.
    Inspect(InspectArgs),
    /// Print trainable and total parameter counts.
    Params(ParamsArgs),
    /// Write the backbone's positional table as an A2PE file.
    ExportPe(ExportPeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Desk,
    Reference,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchPreset {
    Toy,
    Desk,
}

impl BenchPreset {
    fn spec(self, seed: u64) -> BenchmarkSpec {
        match self {
            BenchPreset::Toy => BenchmarkSpec::toy(seed),
            BenchPreset::Desk => BenchmarkSpec::desk(seed),
        }
    }
}

/// Run configuration: a preset or JSON file, then flag overrides.
#[derive(Args)]
struct ConfigArgs {
    /// JSON file with TrainConfig fields; replaces the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// cosine or constant.
    #[arg(long)]
    scheduler: Option<String>,
    #[arg(long)]
    insertion_depth: Option<usize>,
    /// after, before or parallel.
    #[arg(long)]
    adapter_position: Option<String>,
    /// virtual_projection, sinusoidal_3d, learnable_3d or none.
    #[arg(long)]
    pe_mode: Option<String>,
    #[arg(long)]
    m_views: Option<usize>,
    /// 1 is single-threaded and bit-reproducible; 0 uses every core.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    head_only: Option<bool>,
    /// cls or mean_pool.
    #[arg(long)]
    readout: Option<String>,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    backbone_seed: Option<u64>,
    /// Directory with a backbone checkpoint; a random backbone is used otherwise.
    #[arg(long)]
    backbone_checkpoint: Option<PathBuf>,
    /// Nested override such as `adapter.bottleneck_dim=8`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, CliError> {
        let base = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
            }
            None => serde_json::to_value(match self.preset {
                Preset::Toy => TrainConfig::toy(),
                Preset::Desk => TrainConfig::desk(),
                Preset::Reference => TrainConfig::reference(),
            })
            .expect("configs serialize"),
        };
        let mut v = base;
        let mut put = |key: &str, val: Option<Value>| {
            if let Some(val) = val {
                set_path(&mut v, key, val);
            }
        };
        put("lr", self.lr.map(Value::from));
        put("weight_decay", self.weight_decay.map(Value::from));
        put("epochs", self.epochs.map(Value::from));
        put("batch_size", self.batch_size.map(Value::from));
        put("seed", self.seed.map(Value::from));
        put("scheduler", self.scheduler.clone().map(Value::from));
        put("insertion_depth", self.insertion_depth.map(Value::from));
        put("adapter_position", self.adapter_position.clone().map(Value::from));
        put("pe_mode", self.pe_mode.clone().map(Value::from));
        put("m_views", self.m_views.map(Value::from));
        put("threads", self.threads.map(Value::from));
        put("eval_every", self.eval_every.map(Value::from));
        put("head_only", self.head_only.map(Value::from));
        put("readout", self.readout.clone().map(Value::from));
        put("n_classes", self.n_classes.map(Value::from));
        put("backbone_seed", self.backbone_seed.map(Value::from));
        put(
            "backbone_checkpoint",
            self.backbone_checkpoint.as_ref().map(|p| Value::from(p.display().to_string())),
        );
        for kv in &self.set {
            let (key, raw) = kv
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            let val = serde_json::from_str(raw).unwrap_or_else(|_| Value::from(raw));
            set_path(&mut v, key, val);
        }
        let cfg: TrainConfig = serde_json::from_value(v).map_err(|e| CliError::config(format!("configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set_path(v: &mut Value, key: &str, val: Value) {
    let mut cur = v;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        if !cur.get(*p).is_some_and(Value::is_object) {
            cur[*p] = Value::Object(Default::default());
        }
        cur = &mut cur[*p];
    }
    cur[parts[parts.len() - 1]] = val;
}

/// Where the clouds come from: a generated directory, or a benchmark preset
/// built in memory.
#[derive(Args)]
struct DataArgs {
    /// Directory (or index file) written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Benchmark generated in memory when `--data` is absent.
    #[arg(long, value_enum, default_value = "desk")]
    benchmark: BenchPreset,
    /// Seed of the in-memory benchmark; defaults to the run seed.
    #[arg(long)]
    data_seed: Option<u64>,
}

impl DataArgs {
    fn load(&self, seed: u64) -> Result<Dataset<f32>, CliError> {
        match &self.data {
            Some(path) => Ok(read_benchmark::<f32>(path)?.1),
            None => Ok(self.benchmark.spec(self.data_seed.unwrap_or(seed)).generate()?),
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON BenchmarkSpec; flags below are ignored when given.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated class names.
    #[arg(long, value_delimiter = ',', value_parser = parse_shape)]
    classes: Option<Vec<ShapeKind>>,
    #[arg(long, default_value_t = 100)]
    train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    #[arg(long, default_value_t = 512)]
    n_points: usize,
    #[arg(long, default_value_t = 0.01)]
    jitter: f64,
}

fn parse_shape(s: &str) -> Result<ShapeKind, String> {
    s.parse::<ShapeKind>().map_err(|_| {
        let names: Vec<&str> = ShapeKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown class `{s}` (expected one of {})", names.join(", "))
    })
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for metrics.csv, config.json and trainables/.
    #[arg(long)]
    out: PathBuf,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Training output directory, or its trainables/ checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Evaluate on the training split instead of the test split.
    #[arg(long)]
    train_split: bool,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Tables to run; repeatable. All tables when omitted.
    #[arg(long = "table", value_parser = parse_table)]
    tables: Vec<TableKind>,
    #[arg(long, value_enum, default_value = "toy")]
    benchmark: BenchPreset,
    /// Comma-separated seeds; defaults to the run seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Directory for `ablation_<table>.csv`.
    #[arg(long)]
    out: PathBuf,
}

fn parse_table(s: &str) -> Result<TableKind, String> {
    s.parse::<TableKind>().map_err(|e| e.to_string())
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A2PC files to inspect; repeatable.
    #[arg(long = "cloud", required = true)]
    clouds: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Block whose attention map is dumped; defaults to the last.
    #[arg(long)]
    block: Option<usize>,
    #[arg(long, default_value_t = 3)]
    clusters: usize,
}

#[derive(Args)]
struct ParamsArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Also print per-group counts.
    #[arg(long)]
    breakdown: bool,
}

#[derive(Args)]
struct ExportPeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Also save the whole backbone checkpoint to this directory.
    #[arg(long)]
    backbone_out: Option<PathBuf>,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: String) -> Self {
        Self { code: 2, message }
    }

    fn config(message: String) -> Self {
        Self { code: 3, message }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            code: 4,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Format { .. } | Error::ChecksumError { .. } | Error::Csv(_) => 4,
            Error::Numeric(_) | Error::NonScalarLoss { .. } | Error::FrozenViolation(_) => 5,
            _ => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
        }
        None => BenchmarkSpec {
            classes: a.classes.unwrap_or_else(|| ShapeKind::ALL.to_vec()),
            train_per_class: a.train_per_class,
            test_per_class: a.test_per_class,
            n_points: a.n_points,
            jitter_sigma: a.jitter,
            seed: a.seed,
        },
    };
    let index = write_benchmark(&spec, &a.out)?;
    println!(
        "wrote {} train and {} test clouds to {}",
        index.train.len(),
        index.test.len(),
        a.out.display()
    );
    Ok(())
}

fn trainables_dir(path: &Path) -> PathBuf {
    let nested = path.join("trainables");
    if nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    }
}

fn train_cmd(a: TrainArgs) -> Result<(), CliError> {
    let cfg = a.config.resolve()?;
    let ds = a.data.load(cfg.seed)?;
    let backbone = Arc::new(build_backbone::<f32>(&cfg)?);
    create_dir(&a.out)?;
    let quiet = a.quiet;
    let run = train_with_progress(&ds.train, &ds.test, backbone, &cfg, &mut |r| {
        if !quiet {
            match r.acc {
                Some(acc) => eprintln!("epoch {} loss {:.4} acc {:.4} lr {:.2e}", r.epoch, r.loss, acc, r.lr),
                None => eprintln!("epoch {} loss {:.4} lr {:.2e}", r.epoch, r.loss, r.lr),
            }
        }
    })?;
    run.metrics.write_csv(&a.out.join("metrics.csv"))?;
    write_text(
        &a.out.join("config.json"),
        &serde_json::to_string_pretty(&cfg).expect("configs serialize"),
    )?;
    save_trainables(&a.out.join("trainables"), &run.trainables, &cfg)?;
    eprintln!("{}", run.metrics.params.line());
    if let Some(acc) = run.metrics.final_accuracy() {
        println!("{acc:.4}");
    }
    Ok(())
}

fn load_model(checkpoint: &Path, threads: Option<usize>) -> Result<(TrainConfig, Model<f32>, any2point::model::Trainables<f32>), CliError> {
    let dir = trainables_dir(checkpoint);
    let mut cfg = checkpoint_config(&dir)?;
    if let Some(t) = threads {
        cfg.threads = t;
    }
    let trainables = load_trainables::<f32>(&dir, &cfg)?;
    let backbone = Arc::new(build_backbone::<f32>(&cfg)?);
    let model = Model::new(&cfg, backbone)?;
    Ok((cfg, model, trainables))
}

fn eval_cmd(a: EvalArgs) -> Result<(), CliError> {
    let (cfg, model, trainables) = load_model(&a.checkpoint, a.threads)?;
    let ds = a.data.load(cfg.seed)?;
    let clouds = if a.train_split { &ds.train } else { &ds.test };
    let acc = evaluate(&model, &trainables, clouds)?;
    println!("{acc:.4}");
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<(), CliError> {
    let cfg = a.config.resolve()?;
    let seeds = a.seeds.unwrap_or_else(|| vec![cfg.seed]);
    let tables = if a.tables.is_empty() {
        TableKind::ALL.to_vec()
    } else {
        a.tables
    };
    create_dir(&a.out)?;
    let bench = a.benchmark.spec(0);
    for kind in tables {
        let table = build_table(kind, &cfg);
        let n = table.rows.len();
        let result = run_ablation(&table, &bench, &seeds, &mut |i, _| eprintln!("{kind}: row {}/{n}", i + 1))?;
        let path = a.out.join(format!("ablation_{kind}.csv"));
        write_text(&path, &result.to_csv()?)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn inspect_cmd(a: InspectArgs) -> Result<(), CliError> {
    let (_, model, trainables) = load_model(&a.checkpoint, None)?;
    let block = a.block.unwrap_or(model.backbone.config.n_blocks - 1);
    create_dir(&a.out)?;
    for path in &a.clouds {
        let cloud = read_cloud::<f32>(path)?;
        let ins = inspect(&model, &trainables, &cloud, block, a.clusters)?;
        let stem = path.file_stem().map_or("cloud".into(), |s| s.to_string_lossy().into_owned());
        write_score_csv(&a.out.join(format!("{stem}.attention.csv")), &ins.coords, &ins.attention)?;
        write_score_csv(&a.out.join(format!("{stem}.similarity.csv")), &ins.coords, &ins.similarity)?;
        write_label_csv(&a.out.join(format!("{stem}.clusters.csv")), &ins.coords, &ins.clusters)?;
        println!("{stem}: {} tokens", ins.coords.len());
    }
    Ok(())
}

fn params_cmd(a: ParamsArgs) -> Result<(), CliError> {
    let cfg = a.config.resolve()?;
    println!("{}", param_report_for(&cfg).line());
    if a.breakdown {
        let b = any2point::model::trainable_breakdown(&cfg);
        println!(
            "tokenizer={} pe={} adapters={} head={}",
            b.tokenizer, b.pe, b.adapters, b.head
        );
    }
    Ok(())
}

fn export_pe_cmd(a: ExportPeArgs) -> Result<(), CliError> {
    let cfg = a.config.resolve()?;
    let backbone = build_backbone::<f32>(&cfg)?;
    write_pe_table(&a.out, &backbone.pe_table)?;
    if let Some(dir) = &a.backbone_out {
        backbone.save(dir)?;
    }
    println!("{}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Inspect(a) => inspect_cmd(a),
        Command::Params(a) => params_cmd(a),
        Command::ExportPe(a) => export_pe_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
