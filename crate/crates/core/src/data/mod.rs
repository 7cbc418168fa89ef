//! Dataset ingestion, the k-classes-out split, Color-MNIST synthesis,
//! augmentation and batching.
//!
//! Images are held as `f32` in `[-1, 1]`, channel-major per sample.

mod augment;
mod color;
mod folder;
mod idx;
mod split;
mod synthetic;

use std::path::PathBuf;

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, augment_set, flip_horizontal, AffineRange, AugmentPolicy, Jitter};
pub use color::{default_palette, make_color_mnist, ColorMnist, PaletteColor};
pub use folder::{load_image_folder, write_image};
pub use idx::{read_idx_images, read_idx_labels};
pub use split::{held_out_balanced, k_classes_out_split, AnomalyClass, Split, SplitManifest, SplitSpec};
pub use synthetic::synthetic_shapes;

use crate::autograd::{Scalar, Tensor};
use crate::error::{ensure, Result};
use crate::model::SUPPORTED_IMAGE_SIZES;

/// A set of equally sized images with class labels and anomaly flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub channels: usize,
    pub size: usize,
    /// `len * channels * size * size` values in `[-1, 1]`.
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
    pub anomalous: Vec<bool>,
    /// Stable identifiers, usually the index in the source corpus.
    pub ids: Vec<usize>,
}

impl ImageSet {
    pub fn new(channels: usize, size: usize) -> Self {
        ImageSet {
            channels,
            size,
            pixels: Vec::new(),
            labels: Vec::new(),
            anomalous: Vec::new(),
            ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn push(&mut self, image: &[f32], label: usize, anomalous: bool, id: usize) {
        debug_assert_eq!(image.len(), self.sample_len());
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
        self.anomalous.push(anomalous);
        self.ids.push(id);
    }

    pub fn subset(&self, index: &[usize]) -> ImageSet {
        let mut out = ImageSet::new(self.channels, self.size);
        for &i in index {
            out.push(self.image(i), self.labels[i], self.anomalous[i], self.ids[i]);
        }
        out
    }

    /// Images at `index` as a `(B, C, H, W)` tensor.
    pub fn batch<T: Scalar>(&self, index: &[usize]) -> Tensor<T> {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            data.extend(self.image(i).iter().map(|&v| T::from_f64c(v as f64)));
        }
        Tensor::from_vec(&[index.len(), self.channels, self.size, self.size], data)
            .expect("batch shape matches pixel count")
    }

    pub fn labels_at(&self, index: &[usize]) -> Vec<usize> {
        index.iter().map(|&i| self.labels[i]).collect()
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn pixel_range_ok(&self) -> bool {
        self.pixels.iter().all(|v| (-1.0..=1.0).contains(v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    IdxPair,
    ImageFolder,
    Synthetic,
}

/// Where a dataset comes from and how it is normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: SourceKind,
    /// IDX: directory holding the four MNIST-style files, or an image file
    /// when `labels` is set. Image folder: the root directory.
    pub path: PathBuf,
    /// Explicit IDX label file paired with an IDX image file in `path`.
    pub labels: Option<PathBuf>,
    pub image_size: usize,
    pub channels: usize,
    pub class_names: Vec<String>,
    /// Synthetic corpora: samples per class.
    pub per_class: usize,
    /// Synthetic corpora: class count.
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            source: SourceKind::IdxPair,
            path: PathBuf::new(),
            labels: None,
            image_size: 32,
            channels: 1,
            class_names: Vec::new(),
            per_class: 100,
            num_classes: 10,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            SUPPORTED_IMAGE_SIZES.contains(&self.image_size),
            Config,
            "unsupported image_size {}",
            self.image_size
        );
        ensure!(
            self.channels == 1 || self.channels == 3,
            Config,
            "channels must be 1 or 3, got {}",
            self.channels
        );
        if self.source == SourceKind::Synthetic {
            ensure!(self.num_classes >= 2, Config, "a dataset needs at least two classes");
        }
        Ok(())
    }
}

/// Loads every sample described by `spec`, resized and scaled to `[-1, 1]`.
///
/// For an IDX directory the training and test files are concatenated, in
/// that order, so sample ids are stable across runs.
pub fn load_dataset(spec: &DatasetSpec) -> Result<ImageSet> {
    spec.validate()?;
    let set = match spec.source {
        SourceKind::IdxPair => match &spec.labels {
            Some(labels) => idx::load_pair(&spec.path, labels, spec)?,
            None => idx::load_directory(&spec.path, spec)?,
        },
        SourceKind::ImageFolder => folder::load_image_folder(&spec.path, spec.image_size, spec.channels)?.0,
        SourceKind::Synthetic => {
            synthetic_shapes(spec.num_classes, spec.per_class, spec.image_size, spec.channels, spec.seed)
        }
    };
    ensure!(!set.is_empty(), Protocol, "dataset at {} is empty", spec.path.display());
    ensure!(
        set.classes().len() >= 2,
        Protocol,
        "dataset at {} has fewer than two classes",
        spec.path.display()
    );
    Ok(set)
}

/// Resizes an 8-bit channel-major image and maps it to `[-1, 1]`.
pub(crate) fn normalize_u8(raw: &[u8], channels: usize, width: usize, height: usize, size: usize) -> Vec<f32> {
    let plane = width * height;
    let mut out = Vec::with_capacity(channels * size * size);
    for c in 0..channels {
        let gray = image::GrayImage::from_raw(width as u32, height as u32, raw[c * plane..(c + 1) * plane].to_vec())
            .expect("plane length matches dimensions");
        let resized = if width == size && height == size {
            gray
        } else {
            image::imageops::resize(&gray, size as u32, size as u32, FilterType::Triangle)
        };
        out.extend(resized.as_raw().iter().map(|&v| v as f32 / 127.5 - 1.0));
    }
    out
}

/// Maps a `[-1, 1]` value back to 8 bits.
pub fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Sample order for one epoch: a seeded permutation cut into batches.
///
/// Each epoch draws a fresh permutation from its own stream, so orders
/// differ across epochs but are reproducible. With `drop_last` the short
/// final batch is discarded.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64, drop_last: bool) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    chunk(&order, batch_size, drop_last)
}

/// In-order batches covering every sample, for scoring.
pub fn sequential_batches(len: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let order: Vec<usize> = (0..len).collect();
    chunk(&order, batch_size, false)
}

fn chunk(order: &[usize], batch_size: usize, drop_last: bool) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    order
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(|c| c.to_vec())
        .collect()
}

#[cfg(test)]
mod tests;
