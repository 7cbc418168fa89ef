//! Experiment files: one JSON document configuring data, split, model,
//! training, scoring and evaluation, plus the shared data preparation used
//! by the command-line front end.

use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    augment_set, default_palette, held_out_balanced, k_classes_out_split, load_dataset, make_color_mnist,
    AugmentPolicy, DatasetSpec, ImageSet, PaletteColor, Split, SplitManifest, SplitSpec,
};
use crate::error::{ensure, Result, YganError};
use crate::model::ModelConfig;
use crate::scoring::ScoreKind;
use crate::training::TrainConfig;
use crate::weaklabels::WeakLabelManifest;

/// Environment variable naming the dataset root used when a configured
/// path is empty or relative and not found.
pub const DATA_DIR_ENV: &str = "YGAN_DATA_DIR";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dataset: DatasetSpec,
    /// Turn grayscale digits into Color-MNIST after loading.
    pub colorize: bool,
    /// Color list for `colorize`; the default ten-color palette when absent.
    pub palette: Option<Vec<PaletteColor>>,
    /// Enlarges the training split with augmented copies.
    pub augment: Option<AugmentPolicy>,
    /// Weak-label manifest replacing the training labels.
    pub weak_labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSection {
    pub method: ScoreKind,
    pub batch_size: usize,
}

impl Default for ScoreSection {
    fn default() -> Self {
        ScoreSection {
            method: ScoreKind::S,
            batch_size: 256,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Number of leave-one-class-out runs; classes are taken in order.
    pub runs: Option<usize>,
    /// Explicit anomalous class per run, overriding `runs`.
    pub anomaly_classes: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSection,
    pub split: SplitSpec,
    pub score: ScoreSection,
    pub eval: EvalSection,
}

impl ExperimentFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ExperimentFile =
            serde_json::from_str(text).map_err(|e| YganError::Config(format!("invalid experiment file: {e}")))?;
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| YganError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            YganError::Config(msg) => YganError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.dataset.validate()?;
        if let Some(p) = &self.data.augment {
            p.validate()?;
        }
        ensure!(
            self.data.dataset.image_size == self.model.image_size,
            Config,
            "data.dataset.image_size {} differs from model.image_size {}",
            self.data.dataset.image_size,
            self.model.image_size
        );
        let channels = if self.data.colorize { 3 } else { self.data.dataset.channels };
        ensure!(
            !self.data.colorize || self.data.dataset.channels == 1,
            Config,
            "colorize needs grayscale input (data.dataset.channels = 1)"
        );
        ensure!(
            channels == self.model.channels,
            Config,
            "the data provides {} channels but model.channels is {}",
            channels,
            self.model.channels
        );
        ensure!(self.score.batch_size >= 1, Config, "score.batch_size must be positive");
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, for provenance records.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("experiment serializes");
        hex::encode(Sha256::digest(json))
    }

    /// The dataset path after applying the data-root fallback.
    pub fn resolved_data_path(&self) -> PathBuf {
        resolve_data_path(&self.data.dataset.path, std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
    }
}

pub fn resolve_data_path(path: &Path, root: Option<PathBuf>) -> PathBuf {
    match root {
        Some(root) if path.as_os_str().is_empty() => root,
        Some(root) if path.is_relative() && !path.exists() => root.join(path),
        _ => path.to_path_buf(),
    }
}

/// Split data ready for training and evaluation.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub split: Split,
    /// Color label by sample id when the data was colorized.
    pub colors: Option<Vec<usize>>,
}

/// Loads the configured dataset, colorized if requested, with the color
/// label of each sample indexed by sample id.
pub fn load_source(exp: &ExperimentFile) -> Result<(ImageSet, Option<Vec<usize>>)> {
    let mut spec = exp.data.dataset.clone();
    spec.path = exp.resolved_data_path();
    info!("loading dataset from {}", spec.path.display());
    let set = load_dataset(&spec)?;
    if !exp.data.colorize {
        return Ok((set, None));
    }
    let palette = exp.data.palette.clone().unwrap_or_else(default_palette);
    let colored = make_color_mnist(&set, &palette, spec.seed)?;
    let mut by_id = vec![0; colored.set.ids.iter().max().map_or(0, |m| m + 1)];
    for (&id, &c) in colored.set.ids.iter().zip(&colored.colors) {
        by_id[id] = c;
    }
    Ok((colored.set, Some(by_id)))
}

/// Loads, colorizes, splits, relabels and augments as configured.
pub fn prepare_data(exp: &ExperimentFile) -> Result<PreparedData> {
    let (set, colors) = load_source(exp)?;
    let mut split = k_classes_out_split(&set, &exp.split)?;
    if let Some(path) = &exp.data.weak_labels {
        let manifest = WeakLabelManifest::read(path)?;
        split.train = manifest.relabel(&split.train)?;
        split.manifest.label_map = (0..manifest.meta.k).collect();
        info!("training on {} weak labels from {}", manifest.meta.k, path.display());
    }
    if let Some(policy) = &exp.data.augment {
        let mut rng = ChaCha8Rng::seed_from_u64(exp.split.seed ^ 0x5eed);
        split.train = augment_set(&split.train, policy, &mut rng);
    }
    info!(
        "split: {} training samples in {} classes, {} test samples",
        split.train.len(),
        split.num_classes(),
        split.test.len()
    );
    Ok(PreparedData { split, colors })
}

/// Held-out samples per class used to fit and test disentanglement probes.
pub const PROBE_PER_CLASS: usize = 500;

/// Class-balanced colorized samples outside the training split, with their
/// color labels, for disentanglement probes.
pub fn probe_set(exp: &ExperimentFile, manifest: &SplitManifest) -> Result<(ImageSet, Vec<usize>)> {
    ensure!(exp.data.colorize, Config, "probes need colorized data (data.colorize = true)");
    let (set, colors) = load_source(exp)?;
    let colors = colors.expect("colorized source carries colors");
    let held = held_out_balanced(&set, manifest, PROBE_PER_CLASS, exp.split.seed)?;
    let held_colors = held.ids.iter().map(|&i| colors[i]).collect();
    Ok((held, held_colors))
}

/// Model configuration with the class count taken from the training split.
pub fn model_for_split(exp: &ExperimentFile, split: &Split) -> ModelConfig {
    ModelConfig {
        num_classes: split.num_classes(),
        ..exp.model.clone()
    }
}
