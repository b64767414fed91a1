use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ftlab::container::read_file;
use ftlab::divergence::KlMode;
use ftlab::finetune::{Strategy, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS};
use ftlab::mininet::ModelConfig;
use ftlab::synth::{make_source_target_pair_for, TaskSpec, NUM_CLASSES};
use ftlab::{Error, Result};
use serde::{Deserialize, Serialize};

pub const EXPERIMENT_VERSION: u32 = 1;

/// Per-class size of a target training split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "SplitRepr", into = "SplitRepr")]
pub enum SplitSize {
    PerClass(usize),
    All,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SplitRepr {
    PerClass(usize),
    Name(String),
}

impl TryFrom<SplitRepr> for SplitSize {
    type Error = String;

    fn try_from(r: SplitRepr) -> std::result::Result<Self, String> {
        match r {
            SplitRepr::PerClass(0) => Err("split size must be at least 1".into()),
            SplitRepr::PerClass(k) => Ok(SplitSize::PerClass(k)),
            SplitRepr::Name(s) if s == "all" => Ok(SplitSize::All),
            SplitRepr::Name(s) => Err(format!("unknown split `{s}` (expected a count or \"all\")")),
        }
    }
}

impl From<SplitSize> for SplitRepr {
    fn from(s: SplitSize) -> Self {
        match s {
            SplitSize::PerClass(k) => SplitRepr::PerClass(k),
            SplitSize::All => SplitRepr::Name("all".into()),
        }
    }
}

impl fmt::Display for SplitSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitSize::PerClass(k) => write!(f, "k{k}"),
            SplitSize::All => f.write_str("all"),
        }
    }
}

impl FromStr for SplitSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(SplitSize::All);
        }
        s.strip_prefix('k')
            .and_then(|k| k.parse().ok())
            .filter(|&k| k > 0)
            .map(SplitSize::PerClass)
            .ok_or_else(|| Error::Config(format!("bad split label `{s}`")))
    }
}

fn default_shift() -> f32 {
    0.8
}
fn default_per_class() -> usize {
    100
}
fn default_test_per_class() -> usize {
    50
}
fn default_splits() -> Vec<SplitSize> {
    vec![SplitSize::PerClass(20), SplitSize::PerClass(40), SplitSize::All]
}
fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}
fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

/// Grid description: strategies x splits x seeds on one source/target pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub source: TaskSpec,
    /// Explicit target domain; derived from `source` and `shift_magnitude`
    /// when absent.
    #[serde(default)]
    pub target: Option<TaskSpec>,
    #[serde(default = "default_shift")]
    pub shift_magnitude: f32,
    #[serde(default = "default_per_class")]
    pub source_per_class: usize,
    #[serde(default = "default_per_class")]
    pub target_per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "default_splits")]
    pub splits: Vec<SplitSize>,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Source pretraining epochs; defaults to `epochs`.
    #[serde(default)]
    pub pretrain_epochs: Option<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub divergence_mode: KlMode,
    #[serde(default)]
    pub adapt_frozen_bn: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn unique<T: Eq + std::hash::Hash + fmt::Display>(items: &[T], what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for i in items {
        if !seen.insert(i) {
            return Err(Error::Config(format!("duplicate {what} `{i}`")));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn minimal(strategies: Vec<Strategy>, seeds: Vec<u64>) -> Self {
        Self {
            version: EXPERIMENT_VERSION,
            model: ModelConfig::default(),
            source: TaskSpec::default(),
            target: None,
            shift_magnitude: default_shift(),
            source_per_class: default_per_class(),
            target_per_class: default_per_class(),
            test_per_class: default_test_per_class(),
            splits: default_splits(),
            strategies,
            seeds,
            epochs: default_epochs(),
            pretrain_epochs: None,
            batch_size: default_batch_size(),
            divergence_mode: KlMode::Standard,
            adapt_frozen_bn: false,
            output_dir: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::Config(format!("{}: not UTF-8: {e}", path.display())))?;
        Self::parse(text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != EXPERIMENT_VERSION {
            return bad(format!("unsupported config version {} (expected {EXPERIMENT_VERSION})", self.version));
        }
        if self.strategies.is_empty() {
            return bad("at least one strategy is required".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.splits.is_empty() {
            return bad("at least one split is required".into());
        }
        unique(&self.strategies, "strategy")?;
        unique(&self.seeds, "seed")?;
        unique(&self.splits, "split")?;
        self.model.validate()?;
        for s in &self.strategies {
            s.validate(self.model.stages)?;
        }
        if self.model.num_classes != NUM_CLASSES {
            return bad(format!("model.num_classes must be {NUM_CLASSES} for the synthetic task"));
        }
        let (source, target) = self.task_pair();
        source.validate()?;
        target.validate()?;
        for (name, t) in [("source", &source), ("target", &target)] {
            if t.image_size != self.model.input_size {
                return bad(format!(
                    "{name}.image_size {} differs from model.input_size {}",
                    t.image_size, self.model.input_size
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.shift_magnitude) {
            return bad(format!("shift_magnitude {} outside [0, 1]", self.shift_magnitude));
        }
        if self.source_per_class == 0 || self.target_per_class == 0 || self.test_per_class == 0 {
            return bad("per-class sample counts must be positive".into());
        }
        for s in &self.splits {
            if let SplitSize::PerClass(k) = s {
                if *k > self.target_per_class {
                    return bad(format!("split {s} exceeds target_per_class {}", self.target_per_class));
                }
            }
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} < 2", self.batch_size));
        }
        Ok(())
    }

    pub fn task_pair(&self) -> (TaskSpec, TaskSpec) {
        let (source, derived) = make_source_target_pair_for(&self.source, self.shift_magnitude);
        (source, self.target.clone().unwrap_or(derived))
    }

    pub fn pretrain_epochs(&self) -> usize {
        self.pretrain_epochs.unwrap_or(self.epochs)
    }
}
