use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ftlab::container::{read_file, write_atomic};
use ftlab::divergence::{emit_divergence_report, layer_divergence_profile, GroupFilter, ReportFormat};
use ftlab::finetune::{evaluate, prepare_model, train, Strategy, TrainOptions};
use ftlab::mininet::{Checkpoint, Model, ModelConfig};
use ftlab::synth::{few_shot_split, generate_dataset, generate_test_set, Sample};
use ftlab::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SplitSize};

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PRETRAINED_FILE: &str = "pretrained.ftckpt";
pub const MODEL_FILE: &str = "model.ftckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const DIVERGENCE_FILE: &str = "divergence.csv";
pub const CELL_FILE: &str = "cell.json";
pub const STATUS_OK: &str = "ok";

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub seed: u64,
    pub split: SplitSize,
    pub strategy: Strategy,
    pub test_acc: Option<f32>,
    pub status: String,
}

impl CellResult {
    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub split: SplitSize,
    pub strategy: Strategy,
    pub mean_test_acc: Option<f32>,
    pub completed: usize,
    pub total: usize,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub rows: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
    pub computed: usize,
    pub reused: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellRecord {
    seed: u64,
    split: SplitSize,
    strategy: Strategy,
    test_acc: f32,
}

/// Accuracies of the pretrained source model, stored next to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainRecord {
    pub seed: u64,
    pub source_test_acc: f32,
    pub target_test_acc: f32,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Filesystem-safe form of a strategy name (`partial-bn=3,4` -> `partial-bn-3_4`).
pub fn strategy_dir_name(strategy: &Strategy) -> String {
    strategy.to_string().replace('=', "-").replace(',', "_")
}

pub fn cell_dir(out: &Path, seed: u64, split: SplitSize, strategy: &Strategy) -> PathBuf {
    seed_dir(out, seed).join(split.to_string()).join(strategy_dir_name(strategy))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_cell(dir: &Path) -> Option<CellRecord> {
    let bytes = read_file(&dir.join(CELL_FILE)).ok()?;
    let rec: CellRecord = serde_json::from_slice(&bytes).ok()?;
    dir.join(MODEL_FILE).is_file().then_some(rec)
}

struct SeedData {
    target_pool: Vec<Sample>,
    target_test: Vec<Sample>,
}

fn pretrain(cfg: &ExperimentConfig, seed: u64, dir: &Path, log: &mut dyn FnMut(&str)) -> Result<Model> {
    let path = dir.join(PRETRAINED_FILE);
    if path.is_file() {
        log(&format!("seed {seed}: reusing {}", path.display()));
        return Checkpoint::read(&path)?.to_model();
    }
    let (source, target) = cfg.task_pair();
    let train_set = generate_dataset(&source, cfg.source_per_class, seed)?;
    let source_test = generate_test_set(&source, cfg.test_per_class, seed)?;
    let target_test = generate_test_set(&target, cfg.test_per_class, seed)?;
    let mut model = Model::build(ModelConfig { init_seed: seed, ..cfg.model.clone() })?;
    let opts = TrainOptions {
        epochs: cfg.pretrain_epochs(),
        batch_size: cfg.batch_size,
        seed,
        adapt_frozen_bn: false,
        eval_every: 0,
    };
    let history = train(&mut model, &train_set, &Strategy::Scratch, &opts, Some(&source_test))?;
    let record = PretrainRecord {
        seed,
        source_test_acc: evaluate(&model, &source_test)?,
        target_test_acc: evaluate(&model, &target_test)?,
    };
    log(&format!(
        "seed {seed}: pretrained, source acc {:.4}, target acc {:.4}",
        record.source_test_acc, record.target_test_acc
    ));
    history.write_csv(&dir.join("pretrain_history.csv"))?;
    write_json(&dir.join("pretrain.json"), &record)?;
    Checkpoint::from_model(&model).write(&path)?;
    Ok(model)
}

pub fn read_pretrain_record(out: &Path, seed: u64) -> Result<PretrainRecord> {
    let path = seed_dir(out, seed).join("pretrain.json");
    Ok(serde_json::from_slice(&read_file(&path)?)?)
}

fn run_cell(
    cfg: &ExperimentConfig,
    seed: u64,
    split: SplitSize,
    strategy: &Strategy,
    pretrained: &Model,
    data: &SeedData,
    dir: &Path,
) -> Result<f32> {
    let subset;
    let train_set: &[Sample] = match split {
        SplitSize::PerClass(k) => {
            subset = few_shot_split(&data.target_pool, k, seed)?.0;
            &subset
        }
        SplitSize::All => &data.target_pool,
    };
    let mut model = prepare_model(strategy, pretrained, cfg.model.num_classes, seed.wrapping_add(1))?;
    let opts = TrainOptions {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed,
        adapt_frozen_bn: cfg.adapt_frozen_bn,
        eval_every: 0,
    };
    let history = train(&mut model, train_set, strategy, &opts, Some(&data.target_test))?;
    let acc = evaluate(&model, &data.target_test)?;
    mkdir(dir)?;
    let tuned = Checkpoint::from_model(&model);
    let base = Checkpoint::from_model(pretrained);
    let profile = layer_divergence_profile(&tuned, &base, GroupFilter::All, cfg.divergence_mode)?
        .with_labels(MODEL_FILE, format!("../../{PRETRAINED_FILE}"));
    history.write_csv(&dir.join(HISTORY_FILE))?;
    emit_divergence_report(&profile, &dir.join(DIVERGENCE_FILE), ReportFormat::Csv)?;
    tuned.write(&dir.join(MODEL_FILE))?;
    write_json(&dir.join(CELL_FILE), &CellRecord { seed, split, strategy: strategy.clone(), test_acc: acc })?;
    Ok(acc)
}

/// Runs every (seed, split, strategy) cell under `out`, skipping cells whose
/// outputs already exist. A failing cell is recorded and the grid continues.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, log: &mut dyn FnMut(&str)) -> Result<ExperimentReport> {
    cfg.validate()?;
    mkdir(out)?;
    let mut cells: BTreeMap<(usize, usize, usize), CellResult> = BTreeMap::new();
    let (mut computed, mut reused) = (0, 0);
    for (si, &seed) in cfg.seeds.iter().enumerate() {
        let sdir = seed_dir(out, seed);
        let record = |cells: &mut BTreeMap<_, _>, pi: usize, ti: usize, test_acc, status: String| {
            let (split, strategy) = (cfg.splits[pi], cfg.strategies[ti].clone());
            cells.insert((pi, ti, si), CellResult { seed, split, strategy, test_acc, status });
        };
        let mut pending = Vec::new();
        for (pi, &split) in cfg.splits.iter().enumerate() {
            for (ti, strategy) in cfg.strategies.iter().enumerate() {
                match read_cell(&cell_dir(out, seed, split, strategy)) {
                    Some(rec) if rec.seed == seed && rec.split == split && &rec.strategy == strategy => {
                        reused += 1;
                        record(&mut cells, pi, ti, Some(rec.test_acc), STATUS_OK.into());
                    }
                    _ => pending.push((pi, ti)),
                }
            }
        }
        if pending.is_empty() {
            continue;
        }
        let prepared = mkdir(&sdir).and_then(|_| {
            let model = pretrain(cfg, seed, &sdir, log)?;
            let (_, target) = cfg.task_pair();
            let data = SeedData {
                target_pool: generate_dataset(&target, cfg.target_per_class, seed)?,
                target_test: generate_test_set(&target, cfg.test_per_class, seed)?,
            };
            Ok((model, data))
        });
        let (pretrained, data) = match prepared {
            Ok(p) => p,
            Err(e) => {
                log(&format!("seed {seed}: pretraining failed: {e}"));
                for (pi, ti) in pending {
                    record(&mut cells, pi, ti, None, format!("error: pretraining failed: {e}"));
                }
                continue;
            }
        };
        for (pi, ti) in pending {
            let (split, strategy) = (cfg.splits[pi], &cfg.strategies[ti]);
            let dir = cell_dir(out, seed, split, strategy);
            match run_cell(cfg, seed, split, strategy, &pretrained, &data, &dir) {
                Ok(acc) => {
                    computed += 1;
                    log(&format!("seed {seed} {split} {strategy}: test acc {acc:.4}"));
                    record(&mut cells, pi, ti, Some(acc), STATUS_OK.into());
                }
                Err(e) => {
                    log(&format!("seed {seed} {split} {strategy}: failed: {e}"));
                    record(&mut cells, pi, ti, None, format!("error: {e}"));
                }
            }
        }
    }
    let rows: Vec<CellResult> = cells.into_values().collect();
    let summary = summarize(cfg, &rows);
    write_atomic(&out.join(RESULTS_FILE), &results_csv(&rows)?)?;
    write_atomic(&out.join(SUMMARY_FILE), &summary_csv(&summary)?)?;
    Ok(ExperimentReport { rows, summary, computed, reused })
}

/// Mean accuracy per (split, strategy) over completed cells.
pub fn summarize(cfg: &ExperimentConfig, rows: &[CellResult]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for &split in &cfg.splits {
        for strategy in &cfg.strategies {
            let mine: Vec<&CellResult> = rows.iter().filter(|r| r.split == split && &r.strategy == strategy).collect();
            let accs: Vec<f32> = mine.iter().filter(|r| r.is_ok()).filter_map(|r| r.test_acc).collect();
            out.push(SummaryRow {
                split,
                strategy: strategy.clone(),
                mean_test_acc: (!accs.is_empty()).then(|| accs.iter().sum::<f32>() / accs.len() as f32),
                completed: accs.len(),
                total: mine.len(),
            });
        }
    }
    out
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Config(format!("csv: {e}"))
}

fn opt(v: Option<f32>) -> String {
    v.map(|a| a.to_string()).unwrap_or_default()
}

pub fn results_csv(rows: &[CellResult]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "split", "strategy", "test_acc", "status"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.seed.to_string(), r.split.to_string(), r.strategy.to_string(), opt(r.test_acc), r.status.clone()])
            .map_err(csv_err)?;
    }
    w.into_inner().map_err(csv_err)
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["split", "strategy", "mean_test_acc", "completed", "total"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.split.to_string(),
            r.strategy.to_string(),
            opt(r.mean_test_acc),
            r.completed.to_string(),
            r.total.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(csv_err)
}
