use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use ftlab::container::read_file;
use ftlab::divergence::{emit_divergence_report, layer_divergence_profile, GroupFilter, KlMode, ReportFormat};
use ftlab::finetune::{
    evaluate, prepare_model, train, Strategy, TrainOptions, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS,
};
use ftlab::mininet::{Checkpoint, Model, ModelConfig};
use ftlab::synth::{
    encode_dataset, few_shot_split, generate_dataset, generate_test_set, make_source_target_pair_for, read_dataset,
    Sample, TaskSpec,
};
use ftlab::{Error, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::experiment::{run_experiment, summary_csv};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const MODEL_FILE: &str = "model.ftckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const DATA_MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "ftlab", version, about = "Layer-group fine-tuning lab")]
pub struct Cli {
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (or file, for diverge).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON config: a task spec for gen-data, a model config for pretrain,
    /// an experiment config for experiment.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate source/target train and test datasets.
    GenData(GenDataArgs),
    /// Train a model from scratch on a dataset.
    Pretrain(PretrainArgs),
    /// Fine-tune a checkpoint under a layer-group strategy.
    Finetune(FinetuneArgs),
    /// Report top-1 accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Per-layer KL divergence report between two checkpoints.
    Diverge(DivergeArgs),
    /// Run a strategies x splits x seeds grid from a config file.
    Experiment,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 0.8)]
    pub shift: f32,
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Training dataset (.ftdata).
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset evaluated after every epoch.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    pub epochs: usize,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub train: TrainFlags,
}

fn parse_via<T: FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Pretrained checkpoint.
    #[arg(long)]
    pub source: PathBuf,
    /// scratch, fc, cnn-fc, bn-fc, all-uniform, diff-lr or partial-bn=STAGES.
    #[arg(long, value_parser = parse_via::<Strategy>)]
    pub strategy: Strategy,
    /// Train on a seeded class-balanced subset of this many samples per class.
    #[arg(long)]
    pub k_per_class: Option<usize>,
    /// Let frozen BN layers re-estimate running statistics.
    #[arg(long)]
    pub adapt_frozen_bn: bool,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct DivergeArgs {
    pub ckpt_a: PathBuf,
    pub ckpt_b: PathBuf,
    /// standard or paper.
    #[arg(long, default_value = "standard", value_parser = parse_via::<KlMode>)]
    pub mode: KlMode,
    /// all, bn, cnn, bn-weight, bn-bias or fc.
    #[arg(long, default_value = "all", value_parser = parse_via::<GroupFilter>)]
    pub group: GroupFilter,
    /// csv or json.
    #[arg(long, default_value = "csv", value_parser = parse_via::<ReportFormat>)]
    pub format: ReportFormat,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::StageRange { .. } | Error::Classification(_) => EXIT_USAGE,
        Error::Numeric { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| usage("--out is required"))
}

fn no_config(cli: &Cli, cmd: &str) -> Result<()> {
    match cli.config {
        Some(_) => Err(usage(format!("--config is not used by {cmd}"))),
        None => Ok(()),
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_file(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn ensure_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        return Ok(());
    }
    Err(Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
    })
}

fn make_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Pretrain(a) => pretrain(cli, a),
        Command::Finetune(a) => finetune(cli, a),
        Command::Eval(a) => {
            no_config(cli, "eval")?;
            let model = Checkpoint::read(&a.checkpoint)?.to_model()?;
            let data = read_dataset(&a.data)?;
            let acc = evaluate(&model, &data)?;
            println!("samples={}", data.len());
            println!("accuracy={acc}");
            Ok(())
        }
        Command::Diverge(a) => {
            no_config(cli, "diverge")?;
            let out = require_out(cli)?;
            let (ca, cb) = (Checkpoint::read(&a.ckpt_a)?, Checkpoint::read(&a.ckpt_b)?);
            let profile = layer_divergence_profile(&ca, &cb, a.group, a.mode)?
                .with_labels(a.ckpt_a.display().to_string(), a.ckpt_b.display().to_string());
            emit_divergence_report(&profile, out, a.format)?;
            println!("rows={}", profile.rows.len());
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Experiment => experiment(cli),
    }
}

#[derive(Serialize)]
struct DataFileEntry {
    file: String,
    domain: &'static str,
    split: &'static str,
    samples: usize,
    per_class: usize,
}

#[derive(Serialize)]
struct DataManifest {
    version: u32,
    seed: u64,
    shift_magnitude: f32,
    source: TaskSpec,
    target: TaskSpec,
    files: Vec<DataFileEntry>,
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<()> {
    let out = require_out(cli)?;
    if a.per_class == 0 || a.test_per_class == 0 {
        return Err(usage("per-class counts must be positive"));
    }
    if !(0.0..=1.0).contains(&a.shift) {
        return Err(usage(format!("--shift {} outside [0, 1]", a.shift)));
    }
    ensure_dir(out)?;
    let mut base: TaskSpec = match &cli.config {
        Some(p) => load_json(p)?,
        None => TaskSpec { seed: cli.seed, ..TaskSpec::default() },
    };
    if let Some(s) = a.image_size {
        base.image_size = s;
    }
    base.validate()?;
    let (source, target) = make_source_target_pair_for(&base, a.shift);

    let mut files = Vec::new();
    let mut payloads = Vec::new();
    for (domain, spec) in [("source", &source), ("target", &target)] {
        for (split, per_class) in [("train", a.per_class), ("test", a.test_per_class)] {
            let samples = match split {
                "train" => generate_dataset(spec, per_class, cli.seed)?,
                _ => generate_test_set(spec, per_class, cli.seed)?,
            };
            let file = format!("{domain}-{split}.ftdata");
            payloads.push((out.join(&file), encode_dataset(&samples)?));
            files.push(DataFileEntry { file, domain, split, samples: samples.len(), per_class });
        }
    }
    let manifest = DataManifest { version: 1, seed: cli.seed, shift_magnitude: a.shift, source, target, files };
    let mut text = serde_json::to_vec_pretty(&manifest)?;
    text.push(b'\n');
    payloads.push((out.join(DATA_MANIFEST_FILE), text));

    let mut written = Vec::new();
    for (path, bytes) in &payloads {
        if let Err(e) = ftlab::container::write_atomic(path, bytes) {
            for p in written {
                let _ = fs::remove_file(p);
            }
            return Err(e);
        }
        written.push(path);
    }
    for (path, _) in &payloads {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn train_options(cli: &Cli, t: &TrainFlags, adapt_frozen_bn: bool) -> TrainOptions {
    TrainOptions { epochs: t.epochs, batch_size: t.batch_size, seed: cli.seed, adapt_frozen_bn, eval_every: 1 }
}

fn image_size(data: &[Sample]) -> Result<usize> {
    let first = data.first().ok_or(Error::EmptyInput("dataset"))?;
    match first.image.shape() {
        [_, h, w] if h == w => Ok(*h),
        other => Err(Error::Dimension {
            op: "pretrain",
            axis: "image",
            expected: "square [C, S, S]".into(),
            got: format!("{other:?}"),
        }),
    }
}

fn finish_training(out: &Path, model: &Model, history: &ftlab::finetune::History) -> Result<()> {
    make_dir(out)?;
    history.write_csv(&out.join(HISTORY_FILE))?;
    Checkpoint::from_model(model).write(&out.join(MODEL_FILE))?;
    if let Some(acc) = history.final_test_acc() {
        println!("test_accuracy={acc}");
    }
    println!("wrote {}", out.join(MODEL_FILE).display());
    println!("wrote {}", out.join(HISTORY_FILE).display());
    Ok(())
}

fn pretrain(cli: &Cli, a: &PretrainArgs) -> Result<()> {
    let out = require_out(cli)?;
    let data = read_dataset(&a.train.data)?;
    let test = a.train.test.as_deref().map(read_dataset).transpose()?;
    let size = image_size(&data)?;
    let mut config: ModelConfig = match &cli.config {
        Some(p) => load_json(p)?,
        None => ModelConfig { input_size: size, ..ModelConfig::default() },
    };
    config.init_seed = cli.seed;
    if config.input_size != size {
        return Err(Error::Dimension {
            op: "pretrain",
            axis: "input_size",
            expected: config.input_size.to_string(),
            got: size.to_string(),
        });
    }
    let mut model = Model::build(config)?;
    let opts = train_options(cli, &a.train, false);
    let history = train(&mut model, &data, &Strategy::Scratch, &opts, test.as_deref())?;
    finish_training(out, &model, &history)
}

fn finetune(cli: &Cli, a: &FinetuneArgs) -> Result<()> {
    no_config(cli, "finetune")?;
    let out = require_out(cli)?;
    let source = Checkpoint::read(&a.source)?.to_model()?;
    let mut data = read_dataset(&a.train.data)?;
    if let Some(k) = a.k_per_class {
        data = few_shot_split(&data, k, cli.seed)?.0;
    }
    let test = a.train.test.as_deref().map(read_dataset).transpose()?;
    let num_classes = source.config().num_classes;
    let mut model = prepare_model(&a.strategy, &source, num_classes, cli.seed.wrapping_add(1))?;
    let opts = train_options(cli, &a.train, a.adapt_frozen_bn);
    let history = train(&mut model, &data, &a.strategy, &opts, test.as_deref())?;
    finish_training(out, &model, &history)
}

fn experiment(cli: &Cli) -> Result<()> {
    let path = cli.config.as_deref().ok_or_else(|| usage("experiment requires --config"))?;
    let cfg = ExperimentConfig::load(path)?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| usage("experiment needs --out or output_dir in the config"))?;
    let report = run_experiment(&cfg, &out, &mut |line| eprintln!("{line}"))?;
    print!("{}", String::from_utf8_lossy(&summary_csv(&report.summary)?));
    let failed = report.rows.iter().filter(|r| !r.is_ok()).count();
    println!("cells={} computed={} reused={} failed={failed}", report.rows.len(), report.computed, report.reused);
    Ok(())
}
