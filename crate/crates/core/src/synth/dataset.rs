use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render_sample, sample_rng};
use super::spec::{TaskSpec, NUM_CLASSES};
use crate::container::{self, TensorEntry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labelled image, `[C, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
}

const TRAIN_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1 << 40;

fn generate(spec: &TaskSpec, n_per_class: usize, seed: u64, stream_base: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    Ok((0..n_per_class * NUM_CLASSES)
        .map(|i| {
            let label = i % NUM_CLASSES;
            let mut rng = sample_rng(spec.seed, seed, stream_base + i as u64);
            Sample {
                image: render_sample(spec, label, &mut rng),
                label,
            }
        })
        .collect())
}

/// `7 * n_per_class` class-balanced samples, labels interleaved `0..7`.
/// Each sample draws from its own derived stream, so the output does not
/// depend on generation order.
pub fn generate_dataset(spec: &TaskSpec, n_per_class: usize, seed: u64) -> Result<Vec<Sample>> {
    generate(spec, n_per_class, seed, TRAIN_STREAM)
}

/// A test set drawn from a stream disjoint from [`generate_dataset`]'s.
pub fn generate_test_set(spec: &TaskSpec, n_per_class: usize, seed: u64) -> Result<Vec<Sample>> {
    generate(spec, n_per_class, seed, TEST_STREAM)
}

/// Seeded class-balanced sample of `k_per_class` items per class without
/// replacement. Both parts keep the original relative order.
pub fn few_shot_split(dataset: &[Sample], k_per_class: usize, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, s) in dataset.iter().enumerate() {
        if s.label >= NUM_CLASSES {
            return Err(Error::Label { label: s.label, classes: NUM_CLASSES });
        }
        by_class[s.label].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; dataset.len()];
    for (class, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < k_per_class {
            return Err(Error::Split { class, available: idx.len(), requested: k_per_class });
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..k_per_class] {
            chosen[i] = true;
        }
    }
    let (mut subset, mut rest) = (Vec::new(), Vec::new());
    for (s, keep) in dataset.iter().zip(chosen) {
        if keep { subset.push(s.clone()) } else { rest.push(s.clone()) }
    }
    Ok((subset, rest))
}

pub fn class_counts(dataset: &[Sample]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for s in dataset {
        if s.label < NUM_CLASSES {
            counts[s.label] += 1;
        }
    }
    counts
}

pub const DATASET_MAGIC: &[u8; 8] = b"FTDATA01";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    version: u32,
    image_shape: [usize; 3],
    labels: Vec<usize>,
    tensors: Vec<TensorEntry>,
}

/// Encodes a split in the checkpoint container layout: a single `images`
/// tensor `[N, C, H, W]` plus a `labels` array in the manifest.
pub fn encode_dataset(samples: &[Sample]) -> Result<Vec<u8>> {
    let first = samples.first().ok_or(Error::EmptyInput("dataset export"))?;
    let [c, h, w] = match first.image.shape() {
        &[c, h, w] => [c, h, w],
        other => return Err(Error::dim("encode_dataset", "image", "rank 3", format!("{other:?}"))),
    };
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        if s.image.shape() != [c, h, w] {
            return Err(Error::dim("encode_dataset", "image", format!("{:?}", [c, h, w]), format!("{:?}", s.image.shape())));
        }
        data.extend_from_slice(s.image.data());
    }
    let images = Tensor::new(vec![samples.len(), c, h, w], data)?;
    let (tensors, blob) = container::layout_blob([("images", &images)]);
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        image_shape: [c, h, w],
        labels: samples.iter().map(|s| s.label).collect(),
        tensors,
    };
    container::frame(DATASET_MAGIC, &manifest, &blob)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Sample>> {
    let framed = container::unframe(DATASET_MAGIC, bytes)?;
    let manifest: DatasetManifest = container::parse_manifest(&framed)?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::format(12, format!("unsupported version {}", manifest.version)));
    }
    let [c, h, w] = manifest.image_shape;
    let n = manifest.labels.len();
    match manifest.tensors.as_slice() {
        [e] if e.name == "images" && e.shape == [n, c, h, w] => {}
        _ => {
            return Err(Error::format(
                12,
                format!("expected one `images` tensor of shape {:?}", [n, c, h, w]),
            ))
        }
    }
    if let Some(&bad) = manifest.labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::format(12, format!("label {bad} outside 0..{NUM_CLASSES}")));
    }
    let (_, images) = container::read_tensors(&manifest.tensors, &framed)?.remove(0);
    let per = c * h * w;
    manifest
        .labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let image = Tensor::new(vec![c, h, w], images.data()[i * per..][..per].to_vec())?;
            Ok(Sample { image, label })
        })
        .collect()
}

pub fn write_dataset(samples: &[Sample], path: &Path) -> Result<()> {
    container::write_atomic(path, &encode_dataset(samples)?)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    decode_dataset(&container::read_file(path)?)
}
