//! Weak sub-class labels for unsupervised training: a fixed feature
//! extractor, PCA, k-means with silhouette model selection, and purity.

use std::ops::RangeInclusive;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::error::{ensure, Result, YganError};
use crate::model::{Architecture, ModelBundle, ModelConfig};

/// Restarts per k-means call; the lowest-inertia run is kept.
pub const KMEANS_RESTARTS: usize = 10;
/// Largest sample the silhouette is evaluated on.
pub const SILHOUETTE_SAMPLE: usize = 5000;

/// A fixed, deterministic embedding of single images.
pub trait FeatureExtractor {
    fn name(&self) -> String;
    fn extract(&self, image: &[f32], channels: usize, size: usize) -> Result<Vec<f64>>;
}

/// Flattened pixels.
pub struct RawPixels;

impl FeatureExtractor for RawPixels {
    fn name(&self) -> String {
        "raw_pixels".into()
    }

    fn extract(&self, image: &[f32], _: usize, _: usize) -> Result<Vec<f64>> {
        Ok(image.iter().map(|&v| v as f64).collect())
    }
}

/// Randomly initialized, frozen convolutional encoder.
pub struct RandomConvNet {
    bundle: ModelBundle<f32>,
    seed: u64,
}

impl RandomConvNet {
    pub fn new(image_size: usize, channels: usize, width: usize, seed: u64) -> Result<Self> {
        let config = ModelConfig {
            image_size,
            channels,
            latent_dim: width,
            base_filters: 16,
            ..ModelConfig::default()
        };
        let arch = Architecture {
            dual_encoders: false,
            residual_code: false,
            classifier: false,
            discriminator: false,
        };
        Ok(RandomConvNet {
            bundle: ModelBundle::build(&config, arch, seed)?,
            seed,
        })
    }
}

impl FeatureExtractor for RandomConvNet {
    fn name(&self) -> String {
        format!("random_conv(width={}, seed={})", self.bundle.config.latent_dim, self.seed)
    }

    fn extract(&self, image: &[f32], channels: usize, size: usize) -> Result<Vec<f64>> {
        let x = crate::autograd::Tensor::from_vec(&[1, channels, size, size], image.to_vec())?;
        Ok(self.bundle.encode_semantic(&x)?.to_f64_vec())
    }
}

/// One feature row per sample, in set order.
pub fn extract_features(set: &ImageSet, extractor: &dyn FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(set.len());
    let mut failures = Vec::new();
    for i in 0..set.len() {
        match extractor.extract(set.image(i), set.channels, set.size) {
            Ok(f) if f.iter().all(|v| v.is_finite()) => rows.push(f),
            Ok(_) => failures.push(format!("sample {}: non-finite features", set.ids[i])),
            Err(e) => failures.push(format!("sample {}: {e}", set.ids[i])),
        }
    }
    if !failures.is_empty() {
        return Err(YganError::Input(format!(
            "feature extraction failed for {} samples: {}",
            failures.len(),
            failures.iter().take(10).cloned().collect::<Vec<_>>().join("; ")
        )));
    }
    Ok(rows)
}

fn check_matrix(features: &[Vec<f64>]) -> Result<usize> {
    ensure!(!features.is_empty(), Input, "feature matrix is empty");
    let dims = features[0].len();
    ensure!(dims > 0, Input, "feature rows are empty");
    ensure!(
        features.iter().all(|r| r.len() == dims && r.iter().all(|v| v.is_finite())),
        Input,
        "feature rows must be finite and of equal width"
    );
    Ok(dims)
}

/// Mean-centered projection onto the leading principal axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `(out_dims, dims)`, rows ordered by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Eigenvalues of every axis, decreasing.
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    pub fn out_dims(&self) -> usize {
        self.components.len()
    }

    pub fn transform(&self, features: &[Vec<f64>]) -> Vec<Vec<f64>> {
        features
            .iter()
            .map(|row| {
                self.components
                    .iter()
                    .map(|c| c.iter().zip(row).zip(&self.mean).map(|((w, x), m)| w * (x - m)).sum())
                    .collect()
            })
            .collect()
    }

    /// Share of total variance captured by each kept axis.
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().sum();
        self.eigenvalues[..self.out_dims()]
            .iter()
            .map(|e| if total > 0.0 { e / total } else { 0.0 })
            .collect()
    }
}

/// Fits PCA and returns the model with the projected features.
pub fn pca_reduce(features: &[Vec<f64>], out_dims: usize) -> Result<(Pca, Vec<Vec<f64>>)> {
    let dims = check_matrix(features)?;
    let rows = features.len();
    ensure!(
        out_dims >= 1 && out_dims <= dims.min(rows.saturating_sub(1)),
        Input,
        "out_dims {} must lie in 1..={} for a {}x{} matrix",
        out_dims,
        dims.min(rows.saturating_sub(1)),
        rows,
        dims
    );
    let mean: Vec<f64> = (0..dims)
        .map(|d| features.iter().map(|r| r[d]).sum::<f64>() / rows as f64)
        .collect();
    let centered = DMatrix::from_fn(rows, dims, |i, j| features[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (rows as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dims).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let floor = eigenvalues[0].max(f64::MIN_POSITIVE) * 1e-10;
    let rank = eigenvalues.iter().filter(|&&e| e > floor).count().max(1);
    let kept = if rank < out_dims {
        warn!("feature matrix has rank {rank}; reducing to {rank} dimensions instead of {out_dims}");
        rank
    } else {
        out_dims
    };
    let components = order[..kept]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    let pca = Pca {
        mean,
        components,
        eigenvalues,
    };
    let projected = pca.transform(features);
    Ok((pca, projected))
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = dist2(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squared distances.
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step of the kept run.
    pub inertia_trace: Vec<f64>,
}

fn plus_plus_init<R: Rng>(features: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![features[rng.random_range(0..features.len())].clone()];
    let mut d2: Vec<f64> = features.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // every point coincides with a centroid
            Err(_) => rng.random_range(0..features.len()),
        };
        centroids.push(features[next].clone());
        let c = centroids.last().unwrap();
        for (d, p) in d2.iter_mut().zip(features) {
            *d = d.min(dist2(p, c));
        }
    }
    centroids
}

/// One Lloyd run from a k-means++ initialization.
pub fn kmeans_single(features: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeans> {
    let dims = check_matrix(features)?;
    ensure!(k >= 1 && k <= features.len(), Input, "k = {} needs 1..={} rows", k, features.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(features, k, &mut rng);
    let mut assignments = vec![0; features.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut inertia = 0.0;
        let mut dists = vec![0.0; features.len()];
        for (i, p) in features.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            assignments[i] = c;
            dists[i] = d;
            inertia += d;
        }
        trace.push(inertia);

        let mut sums = vec![vec![0.0; dims]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in features.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let updated = if counts[c] == 0 {
                // re-seed an empty cluster at the point farthest from its centroid
                let far = (0..features.len()).max_by(|&a, &b| dists[a].total_cmp(&dists[b])).unwrap();
                dists[far] = 0.0;
                features[far].clone()
            } else {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            };
            shift = shift.max(dist2(&updated, &centroids[c]).sqrt());
            centroids[c] = updated;
        }
        if shift < tol || iterations >= max_iter {
            break;
        }
    }
    let mut inertia = 0.0;
    for (i, p) in features.iter().enumerate() {
        let (c, d) = nearest(p, &centroids);
        assignments[i] = c;
        inertia += d;
    }
    Ok(KMeans {
        assignments,
        centroids,
        inertia,
        iterations,
        inertia_trace: trace,
    })
}

/// Best of [`KMEANS_RESTARTS`] seeded runs by inertia.
pub fn kmeans(features: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeans> {
    let mut best: Option<KMeans> = None;
    for r in 0..KMEANS_RESTARTS as u64 {
        let run = kmeans_single(features, k, seed.wrapping_mul(1000).wrapping_add(r), max_iter, tol)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Mean silhouette coefficient; singleton clusters contribute 0.
pub fn silhouette(features: &[Vec<f64>], assignments: &[usize]) -> Result<f64> {
    ensure!(features.len() == assignments.len(), Input, "{} rows for {} assignments", features.len(), assignments.len());
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    ensure!(sizes.iter().filter(|&&s| s > 0).count() >= 2, Input, "silhouette needs at least two clusters");
    let n = features.len();
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[assignments[j]] += dist2(&features[i], &features[j]).sqrt();
            }
        }
        let own = assignments[i];
        if sizes[own] <= 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub k: usize,
    pub silhouette: f64,
    /// Mean silhouette of every candidate, in range order.
    pub scores: Vec<(usize, f64)>,
    pub clustering: KMeans,
}

/// Clusters the full matrix for each `k` and keeps the `k` with the highest
/// mean silhouette (evaluated on a seeded subsample); ties go to smaller `k`.
pub fn select_k_silhouette(features: &[Vec<f64>], k_range: RangeInclusive<usize>, seed: u64) -> Result<KSelection> {
    check_matrix(features)?;
    let (lo, hi) = (*k_range.start(), *k_range.end());
    ensure!(
        lo >= 2 && lo <= hi && hi < features.len(),
        Config,
        "k range {}..={} must lie within 2..={}",
        lo,
        hi,
        features.len() - 1
    );
    let subset: Vec<usize> = if features.len() > SILHOUETTE_SAMPLE {
        let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), features.len(), SILHOUETTE_SAMPLE).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..features.len()).collect()
    };
    let sub_features: Vec<Vec<f64>> = subset.iter().map(|&i| features[i].clone()).collect();
    let mut best: Option<KSelection> = None;
    let mut scores = Vec::new();
    for k in k_range {
        let clustering = kmeans(features, k, seed, 300, 1e-4)?;
        let sub_assign: Vec<usize> = subset.iter().map(|&i| clustering.assignments[i]).collect();
        let s = silhouette(&sub_features, &sub_assign)?;
        scores.push((k, s));
        if best.as_ref().is_none_or(|b| s > b.silhouette) {
            best = Some(KSelection {
                k,
                silhouette: s,
                scores: Vec::new(),
                clustering,
            });
        }
    }
    let mut best = best.expect("nonempty k range");
    best.scores = scores;
    Ok(best)
}

/// Fraction of samples that share the majority ground-truth label of their
/// cluster.
pub fn cluster_purity(assignments: &[usize], ground_truth: &[usize]) -> Result<f64> {
    ensure!(assignments.len() == ground_truth.len(), Input, "assignment and label counts differ");
    ensure!(!assignments.is_empty(), Input, "purity of an empty assignment");
    let mut table = std::collections::HashMap::<(usize, usize), usize>::new();
    for (&a, &t) in assignments.iter().zip(ground_truth) {
        *table.entry((a, t)).or_default() += 1;
    }
    let mut best = std::collections::HashMap::<usize, usize>::new();
    for (&(a, _), &count) in &table {
        let e = best.entry(a).or_default();
        *e = (*e).max(count);
    }
    Ok(best.values().sum::<usize>() as f64 / assignments.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakLabelRow {
    pub sample_id: usize,
    pub weak_label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakLabelMeta {
    pub k: usize,
    pub silhouette: f64,
    pub silhouette_by_k: Vec<(usize, f64)>,
    pub seed: u64,
    pub extractor: String,
    pub pca_dims: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeakLabelManifest {
    pub rows: Vec<WeakLabelRow>,
    pub meta: WeakLabelMeta,
}

impl WeakLabelManifest {
    /// Writes `path` as CSV and a `.json` sidecar with the metadata.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| YganError::io(path, e))?;
        let sidecar = path.with_extension("json");
        std::fs::write(&sidecar, serde_json::to_vec_pretty(&self.meta)?).map_err(|e| YganError::io(&sidecar, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<WeakLabelRow>, _>>()?;
        let sidecar = path.with_extension("json");
        let meta = serde_json::from_slice(&std::fs::read(&sidecar).map_err(|e| YganError::io(&sidecar, e))?)?;
        Ok(WeakLabelManifest { rows, meta })
    }

    /// Replaces the labels of `set` by weak labels matched on sample id.
    pub fn relabel(&self, set: &ImageSet) -> Result<ImageSet> {
        let map: std::collections::HashMap<usize, usize> =
            self.rows.iter().map(|r| (r.sample_id, r.weak_label)).collect();
        let mut out = set.clone();
        for (label, id) in out.labels.iter_mut().zip(&set.ids) {
            *label = *map
                .get(id)
                .ok_or_else(|| YganError::Input(format!("no weak label for sample {id}")))?;
        }
        Ok(out)
    }
}

/// Full pipeline over a training split: extract, reduce, select `k`, label.
pub fn weak_labels(
    set: &ImageSet,
    extractor: &dyn FeatureExtractor,
    pca_dims: usize,
    k_range: RangeInclusive<usize>,
    seed: u64,
) -> Result<WeakLabelManifest> {
    let features = extract_features(set, extractor)?;
    let dims = pca_dims.min(features[0].len()).min(features.len().saturating_sub(1));
    let (pca, reduced) = pca_reduce(&features, dims)?;
    let selection = select_k_silhouette(&reduced, k_range, seed)?;
    Ok(WeakLabelManifest {
        rows: set
            .ids
            .iter()
            .zip(&selection.clustering.assignments)
            .map(|(&sample_id, &weak_label)| WeakLabelRow { sample_id, weak_label })
            .collect(),
        meta: WeakLabelMeta {
            k: selection.k,
            silhouette: selection.silhouette,
            silhouette_by_k: selection.scores,
            seed,
            extractor: extractor.name(),
            pca_dims: pca.out_dims(),
        },
    })
}

#[cfg(test)]
mod tests;
