use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageSet;
use crate::error::{ensure, Result};

/// Which samples count as anomalous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyClass {
    /// Every sample of this class label.
    Class(usize),
    /// Samples flagged anomalous at ingestion (`anomalous/` subfolders).
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub anomaly_class: AnomalyClass,
    pub train_fraction: f64,
    pub seed: u64,
    pub balance_test: bool,
    /// Caps the training split after the fraction is applied.
    pub max_train: Option<usize>,
    /// Caps each side of the test split.
    pub max_test_per_side: Option<usize>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            anomaly_class: AnomalyClass::Class(0),
            train_fraction: 0.8,
            seed: 0,
            balance_test: true,
            max_train: None,
            max_test_per_side: None,
        }
    }
}

/// Sample ids of each partition, enough to rebuild a split exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    /// `label_map[dense] = original class label`.
    pub label_map: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Split {
    /// Normal samples only, labels remapped to `0..label_map.len()`.
    pub train: ImageSet,
    /// Held-out normal and anomalous samples with their original labels.
    pub test: ImageSet,
    pub manifest: SplitManifest,
}

impl Split {
    pub fn num_classes(&self) -> usize {
        self.manifest.label_map.len()
    }
}

/// One-class split: a seeded fraction of the normal samples for training,
/// the remaining normals plus the anomalies for testing.
pub fn k_classes_out_split(set: &ImageSet, spec: &SplitSpec) -> Result<Split> {
    ensure!(
        spec.train_fraction > 0.0 && spec.train_fraction < 1.0,
        Config,
        "train_fraction must lie in (0, 1), got {}",
        spec.train_fraction
    );
    let is_anomalous = |i: usize| match spec.anomaly_class {
        AnomalyClass::Class(c) => set.labels[i] == c,
        AnomalyClass::External => set.anomalous[i],
    };
    let mut normal: Vec<usize> = (0..set.len()).filter(|&i| !is_anomalous(i)).collect();
    let mut anomalous: Vec<usize> = (0..set.len()).filter(|&i| is_anomalous(i)).collect();
    ensure!(!anomalous.is_empty(), Protocol, "no anomalous samples for {:?}", spec.anomaly_class);
    ensure!(normal.len() >= 2, Protocol, "too few normal samples ({})", normal.len());

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    normal.shuffle(&mut rng);
    anomalous.shuffle(&mut rng);
    let n_train = ((normal.len() as f64 * spec.train_fraction).round() as usize).clamp(1, normal.len() - 1);
    let (train_pool, normal_test) = normal.split_at(n_train);
    let mut train_idx = train_pool.to_vec();
    if let Some(cap) = spec.max_train {
        train_idx.truncate(cap);
    }

    let (mut n_norm, mut n_anom) = (normal_test.len(), anomalous.len());
    if spec.balance_test {
        if n_anom < n_norm {
            warn!("anomalous pool ({n_anom}) smaller than normal test pool ({n_norm}); downsampling normals");
        }
        let m = n_norm.min(n_anom);
        n_norm = m;
        n_anom = m;
    }
    if let Some(cap) = spec.max_test_per_side {
        n_norm = n_norm.min(cap);
        n_anom = n_anom.min(cap);
    }
    let mut test_idx: Vec<usize> = normal_test[..n_norm].iter().chain(&anomalous[..n_anom]).copied().collect();
    test_idx.sort_unstable();
    train_idx.sort_unstable();

    let mut train = set.subset(&train_idx);
    let mut test = set.subset(&test_idx);
    for (k, &i) in test_idx.iter().enumerate() {
        test.anomalous[k] = is_anomalous(i);
    }
    train.anomalous.iter_mut().for_each(|a| *a = false);
    let label_map = train.classes();
    for l in train.labels.iter_mut() {
        *l = label_map.binary_search(l).expect("label present in map");
    }
    ensure!(label_map.len() >= 2, Protocol, "training split has fewer than two classes");

    Ok(Split {
        manifest: SplitManifest {
            spec: spec.clone(),
            train_ids: train.ids.clone(),
            test_ids: test.ids.clone(),
            label_map,
        },
        train,
        test,
    })
}

/// Samples never used for training, at most `per_class` of each original
/// class (seeded choice), with anomaly flags following the split spec.
/// Class-balanced sets give probes a uniform chance level.
pub fn held_out_balanced(set: &ImageSet, manifest: &SplitManifest, per_class: usize, seed: u64) -> Result<ImageSet> {
    ensure!(per_class >= 1, Config, "per_class must be at least 1");
    let train: std::collections::HashSet<usize> = manifest.train_ids.iter().copied().collect();
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
    for i in 0..set.len() {
        if !train.contains(&set.ids[i]) {
            by_class.entry(set.labels[i]).or_default().push(i);
        }
    }
    ensure!(by_class.len() >= 2, Protocol, "held-out samples cover fewer than two classes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut index = Vec::new();
    for pool in by_class.values_mut() {
        pool.shuffle(&mut rng);
        index.extend_from_slice(&pool[..pool.len().min(per_class)]);
    }
    index.sort_unstable();
    let mut out = set.subset(&index);
    for (k, &i) in index.iter().enumerate() {
        out.anomalous[k] = match manifest.spec.anomaly_class {
            AnomalyClass::Class(c) => set.labels[i] == c,
            AnomalyClass::External => set.anomalous[i],
        };
    }
    Ok(out)
}
