//! Deterministic dataset ingestion, augmentation, subsetting and batching.
//!
//! Shuffle order depends only on (seed, epoch); augmentation randomness
//! depends only on (seed, view, epoch, sample index) via counter-based RNG
//! streams, so prefetch parallelism can never perturb results. The teacher
//! and student consume the same samples each step, optionally with
//! independently drawn crops/flips (per-stream `view` offsets).

mod cifar;
mod idx;
mod synth;
mod transform;

pub use cifar::{load_cifar_binary, CifarVariant};
pub use idx::{read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};
pub use synth::{nearest_template_accuracy, synth_generate, SyntheticSpec};
pub use transform::{downsample, downsample_image, subset_few_sample};

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EkdError, Result};
use crate::seeding::{seed_for, seed_for_indexed};
use crate::tensor::Tensor;

/// A loaded image-classification dataset. Pixels are raw (un-normalized)
/// floats in [0, 1], one `[C, H, W]` tensor per sample.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
    pub channels: usize,
    pub resolution: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(EkdError::Data(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        let want = [self.channels, self.resolution, self.resolution];
        for (i, img) in self.images.iter().enumerate() {
            if img.shape() != want {
                return Err(EkdError::Data(format!(
                    "image {i} has shape {:?}, expected {want:?}",
                    img.shape()
                )));
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(EkdError::Data(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Per-channel mean and standard deviation over all pixels.
    pub fn channel_stats(&self) -> (Vec<f32>, Vec<f32>) {
        let c = self.channels;
        let per_channel = self.resolution * self.resolution;
        let mut sum = vec![0.0f64; c];
        let mut sum_sq = vec![0.0f64; c];
        for img in &self.images {
            let data = img.data();
            for ci in 0..c {
                for &v in &data[ci * per_channel..(ci + 1) * per_channel] {
                    sum[ci] += v as f64;
                    sum_sq[ci] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (self.images.len() * per_channel) as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std: Vec<f32> = sum
            .iter()
            .zip(&sum_sq)
            .map(|(s, sq)| {
                let m = s / n;
                (((sq / n - m * m).max(1e-8)).sqrt()) as f32
            })
            .collect();
        (mean, std)
    }
}

/// A batch of normalized input tensors with integer class labels.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    /// `[batch, channels, H, W]`, normalized floats.
    pub images: Tensor<f32>,
    pub labels: Vec<u32>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augmentation {
    /// Zero-padding width before the random crop back to native size;
    /// 0 disables cropping.
    pub crop_padding: usize,
    pub horizontal_flip: bool,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            crop_padding: 4,
            horizontal_flip: true,
        }
    }
}

impl Augmentation {
    pub fn off() -> Self {
        Augmentation {
            crop_padding: 0,
            horizontal_flip: false,
        }
    }

    fn is_identity(&self) -> bool {
        self.crop_padding == 0 && !self.horizontal_flip
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    /// CIFAR-style binary records: label byte(s) then 3072 channel-major pixels.
    Cifar {
        variant: CifarVariant,
        train_files: Vec<PathBuf>,
        test_file: PathBuf,
    },
    /// IDX image/label file pairs (MNIST-style).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        num_classes: usize,
    },
    /// Seeded class-conditional pattern generator.
    Synthetic(SyntheticSpec),
}

/// Everything needed to materialize train/test splits, including the
/// few-sample and low-resolution regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: SourceSpec,
    /// Per-class fraction of training samples retained (in (0, 1]).
    #[serde(default = "default_retain")]
    pub retain_fraction: f64,
    /// Bilinear downsampling target applied to both splits.
    #[serde(default)]
    pub downsample_to: Option<usize>,
    #[serde(default)]
    pub augmentation: Augmentation,
    /// Explicit normalization constants; dataset statistics when absent.
    #[serde(default)]
    pub normalization: Option<Normalization>,
}

fn default_retain() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Materialized train/test data plus the deterministic batch machinery.
#[derive(Debug, Clone)]
pub struct DataPipeline {
    pub train: Dataset,
    pub test: Dataset,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub augmentation: Augmentation,
    pub batch_size: usize,
    pub seed: u64,
    pub workers: usize,
}

impl DataPipeline {
    pub fn from_spec(
        spec: &DatasetSpec,
        seed: u64,
        batch_size: usize,
        workers: usize,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(EkdError::Config("batch_size must be at least 1".into()));
        }
        let (mut train, mut test) = match &spec.source {
            SourceSpec::Cifar {
                variant,
                train_files,
                test_file,
            } => {
                if train_files.is_empty() {
                    return Err(EkdError::Config("no CIFAR train files listed".into()));
                }
                let mut train: Option<Dataset> = None;
                for f in train_files {
                    let part = load_cifar_binary(f, *variant)?;
                    train = Some(match train {
                        None => part,
                        Some(mut acc) => {
                            acc.images.extend(part.images);
                            acc.labels.extend(part.labels);
                            acc
                        }
                    });
                }
                (train.unwrap(), load_cifar_binary(test_file, *variant)?)
            }
            SourceSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                num_classes,
            } => (
                idx::load_idx_pair(train_images, train_labels, *num_classes)?,
                idx::load_idx_pair(test_images, test_labels, *num_classes)?,
            ),
            SourceSpec::Synthetic(synth) => synth_generate(synth, seed_for(seed, "synth")),
        };
        train.validate()?;
        test.validate()?;

        if spec.retain_fraction != 1.0 {
            train = subset_few_sample(&train, spec.retain_fraction, seed_for(seed, "subset"))?;
        }
        if let Some(target) = spec.downsample_to {
            train = downsample(&train, target)?;
            test = downsample(&test, target)?;
        }

        let (mean, std) = match &spec.normalization {
            Some(n) => {
                if n.mean.len() != train.channels || n.std.len() != train.channels {
                    return Err(EkdError::Config(format!(
                        "normalization constants must have {} channels",
                        train.channels
                    )));
                }
                if n.std.iter().any(|s| *s <= 0.0) {
                    return Err(EkdError::Config("normalization std must be positive".into()));
                }
                (n.mean.clone(), n.std.clone())
            }
            None => train.channel_stats(),
        };

        Ok(DataPipeline {
            train,
            test,
            mean,
            std,
            augmentation: spec.augmentation,
            batch_size,
            seed,
            workers: workers.max(1),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    pub fn channels(&self) -> usize {
        self.train.channels
    }

    pub fn resolution(&self) -> usize {
        self.train.resolution
    }

    /// Shuffled sample indices for one epoch, partitioned into batches.
    /// The last partial batch is kept. Order is a pure function of
    /// (seed, epoch).
    pub fn epoch_index_batches(&self, epoch: u32) -> Vec<Vec<u32>> {
        let mut order: Vec<u32> = (0..self.train.len() as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for_indexed(self.seed, "shuffle", &[epoch as u64]));
        order.shuffle(&mut rng);
        order
            .chunks(self.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }

    /// Training view of the given samples: per-sample crop/flip drawn from
    /// the (seed, view, epoch, index) counter stream, then normalization.
    pub fn train_batch(&self, indices: &[u32], epoch: u32, view: u64) -> Result<LabeledBatch> {
        let sample_len = self.train.channels * self.train.resolution * self.train.resolution;
        let make = |&idx: &u32| -> Vec<f32> {
            self.augment_sample(idx as usize, epoch, view)
        };
        let parts: Vec<Vec<f32>> = if self.workers > 1 && indices.len() > 1 {
            indices.par_iter().map(make).collect()
        } else {
            indices.iter().map(make).collect()
        };
        let mut data = Vec::with_capacity(indices.len() * sample_len);
        for p in parts {
            data.extend(p);
        }
        let images = Tensor::from_vec(
            vec![
                indices.len(),
                self.train.channels,
                self.train.resolution,
                self.train.resolution,
            ],
            data,
        )?;
        let labels = indices.iter().map(|&i| self.train.labels[i as usize]).collect();
        Ok(LabeledBatch { images, labels })
    }

    /// Normalize-only batches over a split in stored order.
    pub fn eval_batches(&self, split: Split) -> Result<Vec<LabeledBatch>> {
        let ds = match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        };
        if ds.is_empty() {
            return Err(EkdError::Data("evaluation on an empty dataset".into()));
        }
        let sample_len = ds.channels * ds.resolution * ds.resolution;
        let mut out = Vec::new();
        for chunk in (0..ds.len()).collect::<Vec<_>>().chunks(self.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * sample_len);
            for &i in chunk {
                data.extend(self.normalize(ds.images[i].data()));
            }
            let images = Tensor::from_vec(
                vec![chunk.len(), ds.channels, ds.resolution, ds.resolution],
                data,
            )?;
            let labels = chunk.iter().map(|&i| ds.labels[i]).collect();
            out.push(LabeledBatch { images, labels });
        }
        Ok(out)
    }

    fn normalize(&self, raw: &[f32]) -> Vec<f32> {
        let per_channel = self.train.resolution * self.train.resolution;
        raw.iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / per_channel;
                (v - self.mean[c]) / self.std[c]
            })
            .collect()
    }

    fn augment_sample(&self, idx: usize, epoch: u32, view: u64) -> Vec<f32> {
        let raw = self.train.images[idx].data();
        if self.augmentation.is_identity() {
            return self.normalize(raw);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for_indexed(
            self.seed,
            "aug",
            &[view, epoch as u64, idx as u64],
        ));
        let res = self.train.resolution;
        let pad = self.augmentation.crop_padding;
        let (dy, dx) = if pad > 0 {
            (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad))
        } else {
            (pad, pad)
        };
        let flip = self.augmentation.horizontal_flip && rng.random_range(0..2) == 1;
        let per_channel = res * res;
        let mut out = vec![0.0f32; raw.len()];
        for c in 0..self.train.channels {
            for y in 0..res {
                let sy = (y + dy) as isize - pad as isize;
                for x in 0..res {
                    let x_src = if flip { res - 1 - x } else { x };
                    let sx = (x_src + dx) as isize - pad as isize;
                    let v = if sy >= 0 && sy < res as isize && sx >= 0 && sx < res as isize {
                        raw[c * per_channel + sy as usize * res + sx as usize]
                    } else {
                        0.0
                    };
                    out[c * per_channel + y * res + x] = (v - self.mean[c]) / self.std[c];
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_synth_spec() -> DatasetSpec {
        DatasetSpec {
            source: SourceSpec::Synthetic(SyntheticSpec {
                num_classes: 4,
                train_per_class: 10,
                test_per_class: 5,
                resolution: 8,
                channels: 3,
                ..SyntheticSpec::default()
            }),
            retain_fraction: 1.0,
            downsample_to: None,
            augmentation: Augmentation::default(),
            normalization: None,
        }
    }

    #[test]
    fn batch_partition_keeps_partial_tail() {
        let spec = tiny_synth_spec();
        let p = DataPipeline::from_spec(&spec, 5, 16, 1).unwrap();
        let batches = p.epoch_index_batches(0);
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![16, 16, 8]);
        // every sample exactly once
        let mut seen: Vec<u32> = batches.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn shuffle_is_seed_and_epoch_deterministic() {
        let spec = tiny_synth_spec();
        let p = DataPipeline::from_spec(&spec, 5, 8, 1).unwrap();
        assert_eq!(p.epoch_index_batches(3), p.epoch_index_batches(3));
        assert_ne!(p.epoch_index_batches(3), p.epoch_index_batches(4));
        let q = DataPipeline::from_spec(&spec, 6, 8, 1).unwrap();
        assert_ne!(p.epoch_index_batches(3), q.epoch_index_batches(3));
    }

    #[test]
    fn augmentation_off_equals_normalized_originals() {
        let mut spec = tiny_synth_spec();
        spec.augmentation = Augmentation::off();
        let p = DataPipeline::from_spec(&spec, 5, 8, 1).unwrap();
        let batch = p.train_batch(&[0, 3], 0, 0).unwrap();
        let want0 = p.normalize(p.train.images[0].data());
        let got0 = &batch.images.data()[..want0.len()];
        assert_eq!(got0, &want0[..]);
    }

    #[test]
    fn augmented_views_are_counter_deterministic() {
        let spec = tiny_synth_spec();
        let p1 = DataPipeline::from_spec(&spec, 5, 8, 1).unwrap();
        let p8 = DataPipeline::from_spec(&spec, 5, 8, 8).unwrap();
        let idx = [0u32, 1, 2, 3, 4];
        let a = p1.train_batch(&idx, 2, 0).unwrap();
        let b = p8.train_batch(&idx, 2, 0).unwrap();
        assert!(a.images.bit_eq(&b.images), "worker count changed pixels");
        let c = p1.train_batch(&idx, 2, 1).unwrap();
        assert!(!a.images.bit_eq(&c.images), "view offset had no effect");
        let d = p1.train_batch(&idx, 3, 0).unwrap();
        assert!(!a.images.bit_eq(&d.images), "epoch had no effect");
    }

    #[test]
    fn normalized_eval_stats_match_targets() {
        let spec = tiny_synth_spec();
        let p = DataPipeline::from_spec(&spec, 5, 64, 1).unwrap();
        let batches = p.eval_batches(Split::Train).unwrap();
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        let mut n = 0usize;
        for b in &batches {
            for &v in b.images.data() {
                sum += v as f64;
                sum_sq += (v as f64) * (v as f64);
                n += 1;
            }
        }
        let mean = sum / n as f64;
        let std = (sum_sq / n as f64 - mean * mean).sqrt();
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((std - 1.0).abs() < 0.05, "std {std}");
    }

    #[test]
    fn empty_eval_split_is_an_error() {
        let spec = tiny_synth_spec();
        let mut p = DataPipeline::from_spec(&spec, 5, 8, 1).unwrap();
        p.test.images.clear();
        p.test.labels.clear();
        assert!(p.eval_batches(Split::Test).is_err());
    }
}
