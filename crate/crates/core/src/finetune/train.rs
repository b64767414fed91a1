use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::strategy::{build_freeze_plan, LrTable, Strategy};
use crate::error::{Error, Result};
use crate::mininet::{Model, ModelConfig};
use crate::nn::{softmax_cross_entropy, Mode};
use crate::synth::Sample;
use crate::tensor::Tensor;

pub const DEFAULT_EPOCHS: usize = 40;
pub const DEFAULT_BATCH_SIZE: usize = 16;
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Let frozen BN layers re-estimate running statistics on training data.
    pub adapt_frozen_bn: bool,
    /// Evaluate the test set every this many epochs (the last epoch is always
    /// evaluated). 0 evaluates only the last epoch.
    pub eval_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            adapt_frozen_bn: false,
            eval_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_acc: f32,
    pub test_acc: Option<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct History {
    pub strategy: Strategy,
    pub lr: LrTable,
    pub records: Vec<EpochRecord>,
}

pub const OPTIMIZER: &str = "adam";

pub const HISTORY_HEADER: [&str; 9] =
    ["epoch", "strategy", "optimizer", "lr_cnn", "lr_bn", "lr_fc", "train_loss", "train_acc", "test_acc"];

impl History {
    pub fn final_test_acc(&self) -> Option<f32> {
        self.records.last().and_then(|r| r.test_acc)
    }

    /// CSV with [`HISTORY_HEADER`]; frozen groups report rate 0, unevaluated
    /// epochs leave `test_acc` empty.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Config(format!("csv: {e}"));
        w.write_record(HISTORY_HEADER).map_err(io)?;
        let rate = |r: Option<f32>| r.unwrap_or(0.0).to_string();
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                self.strategy.to_string(),
                OPTIMIZER.to_string(),
                rate(self.lr.cnn),
                rate(self.lr.bn),
                rate(self.lr.fc),
                r.train_loss.to_string(),
                r.train_acc.to_string(),
                r.test_acc.map(|a| a.to_string()).unwrap_or_default(),
            ])
            .map_err(io)?;
        }
        w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::container::write_atomic(path, &self.to_csv()?)
    }
}

/// Stacks `[C, H, W]` images into `[N, C, H, W]`.
pub fn stack_images<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<(Tensor, Vec<usize>)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    for s in samples {
        match &shape {
            None => shape = Some(s.image.shape().to_vec()),
            Some(sh) if sh.as_slice() != s.image.shape() => {
                return Err(Error::dim("stack_images", "image", format!("{sh:?}"), format!("{:?}", s.image.shape())))
            }
            _ => {}
        }
        data.extend_from_slice(s.image.data());
        labels.push(s.label);
    }
    let shape = shape.ok_or(Error::EmptyInput("batch"))?;
    if shape.len() != 3 {
        return Err(Error::dim("stack_images", "image", "rank 3", shape.len()));
    }
    let mut full = vec![labels.len()];
    full.extend(shape);
    Ok((Tensor::new(full, data)?, labels))
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let [n, k] = logits.dims2("argmax_rows")?;
    Ok((0..n)
        .map(|r| {
            let row = &logits.data()[r * k..][..k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

pub fn count_correct(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    let preds = argmax_rows(logits)?;
    if preds.len() != labels.len() {
        return Err(Error::dim("count_correct", "labels", preds.len(), labels.len()));
    }
    Ok(preds.iter().zip(labels).filter(|(p, l)| p == l).count())
}

/// Eval-mode top-1 accuracy in `[0, 1]`.
pub fn evaluate(model: &Model, dataset: &[Sample]) -> Result<f32> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0;
    for chunk in dataset.chunks(EVAL_CHUNK) {
        let (x, labels) = stack_images(chunk)?;
        correct += count_correct(&model.predict(&x)?, &labels)?;
    }
    Ok(correct as f32 / dataset.len() as f32)
}

/// Starting point for a fine-tuning run: a fresh model (seeded by
/// `init_seed`) for [`Strategy::Scratch`], otherwise a copy of `source`.
/// The head is re-initialized when the class count differs.
pub fn prepare_model(strategy: &Strategy, source: &Model, num_classes: usize, init_seed: u64) -> Result<Model> {
    if !strategy.transfers() {
        return Model::build(ModelConfig {
            num_classes,
            init_seed,
            ..source.config().clone()
        });
    }
    let mut model = source.clone();
    if model.config().num_classes != num_classes {
        model.reinit_head(num_classes, init_seed)?;
    }
    Ok(model)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Adam training under the strategy's freeze plan. Frozen parameters and
/// (unless `adapt_frozen_bn`) frozen BN running statistics never change.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    strategy: &Strategy,
    opts: &TrainOptions,
    test_set: Option<&[Sample]>,
) -> Result<History> {
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if opts.batch_size < 2 {
        return Err(Error::Config(format!("batch_size {} < 2 leaves batch norm degenerate", opts.batch_size)));
    }
    if train_set.len() < 2 {
        return Err(Error::Config("training set needs at least 2 samples".into()));
    }
    let mut plan = build_freeze_plan(strategy, model)?;
    if opts.adapt_frozen_bn {
        plan = plan.with_frozen_bn_adaptation();
    }
    let mut history = History {
        strategy: strategy.clone(),
        lr: strategy.lr_table(),
        records: Vec::with_capacity(opts.epochs),
    };
    let mut adam = AdamState::new(model);
    let update = |layer: &str| plan.bn_update_running.get(layer).copied().unwrap_or(false);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=opts.epochs {
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(opts.seed, epoch));
        let (mut loss_sum, mut correct, mut seen) = (0.0f32, 0usize, 0usize);
        for idx in order.chunks(opts.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let (x, labels) = stack_images(idx.iter().map(|&i| &train_set[i]))?;
            let (logits, cache) = model.forward_with(&x, Mode::Train, &update)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            let grads = model.backward(&cache, &grad)?;
            adam_step(model, &grads, &plan, &mut adam)?;
            loss_sum += loss * idx.len() as f32;
            correct += count_correct(&logits, &labels)?;
            seen += idx.len();
        }
        let due = epoch == opts.epochs || (opts.eval_every > 0 && epoch % opts.eval_every == 0);
        let test_acc = match test_set {
            Some(t) if due => Some(evaluate(model, t)?),
            _ => None,
        };
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f32,
            train_acc: correct as f32 / seen as f32,
            test_acc,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mininet::Checkpoint;
    use crate::synth::{generate_dataset, TaskSpec};
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig { input_size: 16, base_channels: 4, ..ModelConfig::default() }
    }

    /// Two classes: bright left half vs bright right half.
    fn separable(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let mut data = vec![0.0f32; 3 * 16 * 16];
                for c in 0..3 {
                    for y in 0..16 {
                        for x in 0..16 {
                            let lit = (x < 8) == (label == 0);
                            data[(c * 16 + y) * 16 + x] = if lit { 0.8 } else { 0.2 } + rng.random_range(-0.1..0.1);
                        }
                    }
                }
                Sample { image: Tensor::new(vec![3, 16, 16], data).unwrap(), label }
            })
            .collect()
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let z = Tensor::new(vec![2, 3], vec![1., 1., 0., 0., 2., 2.]).unwrap();
        assert_eq!(argmax_rows(&z).unwrap(), [0, 1]);
    }

    #[test]
    fn accuracy_extremes() {
        let labels = [0usize, 3, 6, 2];
        let mut onehot = Tensor::zeros(&[4, 7]);
        for (r, &l) in labels.iter().enumerate() {
            onehot.data_mut()[r * 7 + l] = 1.0;
        }
        assert_eq!(count_correct(&onehot, &labels).unwrap(), 4);
        let permuted = [1usize, 4, 0, 3];
        assert_eq!(count_correct(&onehot, &permuted).unwrap(), 0);
    }

    #[test]
    fn random_logits_score_near_chance() {
        // Binomial(n, 1/7) oracle: mean n/7, std sqrt(n p (1-p)).
        let n = 7000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::new(vec![n, 7], (0..n * 7).map(|_| rng.random::<f32>()).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..7)).collect();
        let acc = count_correct(&z, &labels).unwrap() as f64 / n as f64;
        let p = 1.0 / 7.0;
        let std = (p * (1.0 - p) / n as f64).sqrt();
        assert!((acc - p).abs() < 3.0 * std, "acc {acc}");
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut m = Model::build(small_config()).unwrap();
        let before = Checkpoint::from_model(&m).to_bytes().unwrap();
        let data = separable(8, 1);
        let opts = TrainOptions { epochs: 0, ..TrainOptions::default() };
        let h = train(&mut m, &data, &Strategy::Scratch, &opts, None).unwrap();
        assert!(h.records.is_empty());
        assert_eq!(Checkpoint::from_model(&m).to_bytes().unwrap(), before);
    }

    #[test]
    fn config_errors() {
        let mut m = Model::build(small_config()).unwrap();
        let opts = TrainOptions::default();
        assert!(matches!(train(&mut m, &[], &Strategy::Scratch, &opts, None), Err(Error::Config(_))));
        let bad = TrainOptions { batch_size: 1, ..opts };
        assert!(matches!(train(&mut m, &separable(4, 0), &Strategy::Scratch, &bad, None), Err(Error::Config(_))));
        assert!(matches!(evaluate(&m, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn scratch_learns_separable_task() {
        let data = separable(64, 2);
        let mut m = Model::build(ModelConfig { num_classes: 2, ..small_config() }).unwrap();
        let opts = TrainOptions { epochs: 20, batch_size: 16, seed: 3, ..TrainOptions::default() };
        let h = train(&mut m, &data, &Strategy::Scratch, &opts, Some(&data)).unwrap();
        assert_eq!(h.records.len(), 20);
        assert!(h.records.last().unwrap().train_acc > 0.9, "{:?}", h.records.last());
        assert!(evaluate(&m, &data).unwrap() > 0.9);
    }

    #[test]
    fn fc_only_preserves_everything_else() {
        let spec = TaskSpec { image_size: 16, ..TaskSpec::default() };
        let data = generate_dataset(&spec, 3, 1).unwrap();
        let source = Model::build(small_config()).unwrap();
        let mut m = prepare_model(&Strategy::FcOnly, &source, 7, 9).unwrap();
        let opts = TrainOptions { epochs: 2, batch_size: 4, ..TrainOptions::default() };
        train(&mut m, &data, &Strategy::FcOnly, &opts, None).unwrap();
        for (name, t) in source.params() {
            assert_eq!(t.bit_eq(&m.params()[name]), !name.starts_with("head."), "{name}");
        }
        assert_eq!(source.bn_stats(), m.bn_stats());
    }

    #[test]
    fn training_is_reproducible() {
        let spec = TaskSpec { image_size: 16, ..TaskSpec::default() };
        let data = generate_dataset(&spec, 2, 4).unwrap();
        let run = || {
            let mut m = Model::build(small_config()).unwrap();
            let opts = TrainOptions { epochs: 2, batch_size: 5, seed: 11, ..TrainOptions::default() };
            let h = train(&mut m, &data, &Strategy::DifferentialLr, &opts, Some(&data)).unwrap();
            (Checkpoint::from_model(&m).to_bytes().unwrap(), h.to_csv().unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn history_csv_layout() {
        let h = History {
            strategy: "partial-bn=3,4".parse().unwrap(),
            lr: "partial-bn=3,4".parse::<Strategy>().unwrap().lr_table(),
            records: vec![EpochRecord { epoch: 1, train_loss: 1.5, train_acc: 0.25, test_acc: None }],
        };
        let text = String::from_utf8(h.to_csv().unwrap()).unwrap();
        assert_eq!(
            text,
            "epoch,strategy,optimizer,lr_cnn,lr_bn,lr_fc,train_loss,train_acc,test_acc\n1,\"partial-bn=3,4\",adam,0,0.01,0.01,1.5,0.25,\n"
        );
    }

    #[test]
    fn scratch_preparation_ignores_source_weights() {
        let source = Model::build(ModelConfig { init_seed: 1, ..small_config() }).unwrap();
        let fresh = prepare_model(&Strategy::Scratch, &source, 7, 2).unwrap();
        assert_eq!(fresh.config().init_seed, 2);
        assert!(!fresh.params()["s1.b0.conv.weight"].bit_eq(&source.params()["s1.b0.conv.weight"]));
        let moved = prepare_model(&Strategy::BnFc, &source, 3, 2).unwrap();
        assert_eq!(moved.params()["head.fc.bias"].shape(), &[3]);
        assert!(moved.params()["s1.b0.conv.weight"].bit_eq(&source.params()["s1.b0.conv.weight"]));
    }
}
