//! Detection metrics, the leave-one-class-out protocol, and linear probes
//! for measuring what each latent code encodes.
//!
//! Anomalous samples are the positive class and higher scores mean more
//! anomalous throughout.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Scalar;
use crate::data::{k_classes_out_split, sequential_batches, AnomalyClass, ImageSet, SplitSpec};
use crate::error::{ensure, Result, YganError};
use crate::model::{ModelBundle, ModelConfig};
use crate::scoring::{compute_prototypes, score_dataset, semantic_codes, ScoreKind, ScoreMethod};
use crate::training::{train, TrainConfig, TrainOptions};
use crate::weaklabels::kmeans;

fn class_counts(labels: &[bool]) -> Result<(u64, u64)> {
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    ensure!(
        pos > 0 && neg > 0,
        Protocol,
        "metrics need both normal and anomalous samples ({} anomalous, {} normal)",
        pos,
        neg
    );
    Ok((pos, neg))
}

/// One ROC operating point: samples with `score >= threshold` are flagged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    /// Raw counts, kept for exact area computation.
    pub fp: u64,
    pub tp: u64,
}

/// ROC operating points from "flag nothing" to "flag everything", one per
/// distinct score.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    ensure!(scores.len() == labels.len(), Input, "{} scores for {} labels", scores.len(), labels.len());
    ensure!(scores.iter().all(|s| !s.is_nan()), Input, "scores contain NaN");
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
        fp: 0,
        tp: 0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            fp,
            tp,
        });
    }
    Ok(points)
}

/// Trapezoidal area under the ROC curve. Tied scores form one diagonal
/// segment, which is the Mann-Whitney convention of counting ties as ½.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(labels)?;
    let roc = roc_curve(scores, labels)?;
    // twice the area in units of one (positive, negative) pair
    let twice: u128 = roc
        .windows(2)
        .map(|w| (w[1].fp - w[0].fp) as u128 * (w[0].tp + w[1].tp) as u128)
        .sum();
    Ok(twice as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Equal-error operating point: `(threshold, eer)` where the false positive
/// and false negative rates cross, linearly interpolated between the two
/// adjacent ROC points that bracket the crossing.
pub fn eer_threshold(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    let roc = roc_curve(scores, labels)?;
    let gap = |p: &RocPoint| p.fpr - (1.0 - p.tpr);
    for w in roc.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let (ga, gb) = (gap(a), gap(b));
        if ga == 0.0 {
            return Ok((finite_threshold(a, b), a.fpr));
        }
        if gb == 0.0 {
            return Ok((b.threshold, b.fpr));
        }
        if ga < 0.0 && gb > 0.0 {
            let alpha = ga / (ga - gb);
            let eer = a.fpr + alpha * (b.fpr - a.fpr);
            let threshold = if a.threshold.is_finite() {
                a.threshold + alpha * (b.threshold - a.threshold)
            } else {
                b.threshold
            };
            return Ok((threshold, eer));
        }
    }
    unreachable!("the gap runs from -1 to +1 along the ROC curve")
}

fn finite_threshold(a: &RocPoint, b: &RocPoint) -> f64 {
    if a.threshold.is_finite() {
        a.threshold
    } else {
        b.threshold
    }
}

/// Detection rates of one class at a global threshold; `None` where the
/// class has no members on that side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRates {
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub anomalous: usize,
    pub normal: usize,
}

pub fn tpr_tnr_per_class(
    scores: &[f64],
    labels: &[bool],
    class_ids: &[usize],
    threshold: f64,
) -> Result<BTreeMap<usize, ClassRates>> {
    ensure!(
        scores.len() == labels.len() && labels.len() == class_ids.len(),
        Input,
        "scores, labels and class ids differ in length"
    );
    let mut counts: BTreeMap<usize, [usize; 4]> = BTreeMap::new();
    for i in 0..scores.len() {
        let c = counts.entry(class_ids[i]).or_default();
        let flagged = scores[i] >= threshold;
        match (labels[i], flagged) {
            (true, true) => c[0] += 1,
            (true, false) => c[1] += 1,
            (false, false) => c[2] += 1,
            (false, true) => c[3] += 1,
        }
    }
    Ok(counts
        .into_iter()
        .map(|(class, [tp, fn_, tn, fp])| {
            let rate = |hit: usize, miss: usize| (hit + miss > 0).then(|| hit as f64 / (hit + miss) as f64);
            (
                class,
                ClassRates {
                    tpr: rate(tp, fn_),
                    tnr: rate(tn, fp),
                    anomalous: tp + fn_,
                    normal: tn + fp,
                },
            )
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub anomaly_class: Option<usize>,
    pub auc: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    pub per_class: BTreeMap<usize, ClassRates>,
    pub seed: u64,
    pub score_method: ScoreKind,
}

/// Metrics of one scored evaluation set.
pub fn evaluate_scores(
    scores: &[f64],
    labels: &[bool],
    class_ids: &[usize],
    anomaly_class: Option<usize>,
    seed: u64,
    method: ScoreKind,
) -> Result<RunResult> {
    let (threshold, eer) = eer_threshold(scores, labels)?;
    Ok(RunResult {
        anomaly_class,
        auc: auc(scores, labels)?,
        eer,
        eer_threshold: threshold,
        per_class: tpr_tnr_per_class(scores, labels, class_ids, threshold)?,
        seed,
        score_method: method,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub runs: Vec<RunResult>,
    /// `(anomaly class, error message)` of runs that did not complete.
    pub failures: Vec<(usize, String)>,
    pub mean_auc: f64,
    /// Population standard deviation over completed runs.
    pub std_auc: f64,
}

impl ProtocolReport {
    pub fn from_runs(runs: Vec<RunResult>, failures: Vec<(usize, String)>) -> Result<Self> {
        ensure!(!runs.is_empty(), Protocol, "no protocol run completed");
        let n = runs.len() as f64;
        let mean = runs.iter().map(|r| r.auc).sum::<f64>() / n;
        let var = runs.iter().map(|r| (r.auc - mean).powi(2)).sum::<f64>() / n;
        Ok(ProtocolReport {
            runs,
            failures,
            mean_auc: mean,
            std_auc: var.sqrt(),
        })
    }

    /// One row per method, one column per anomalous class, then mean ± std.
    pub fn markdown(&self, row_name: &str) -> String {
        let mut s = String::from("| Method |");
        let mut rule = String::from("|---|");
        for r in &self.runs {
            let col = r.anomaly_class.map(|c| c.to_string()).unwrap_or_else(|| "all".into());
            let _ = write!(s, " {col} |");
            rule.push_str("---|");
        }
        s.push_str(" Mean ± Std |\n");
        s.push_str(&rule);
        s.push_str("---|\n");
        let _ = write!(s, "| {row_name} |");
        for r in &self.runs {
            let _ = write!(s, " {:.3} |", r.auc);
        }
        let _ = writeln!(s, " {:.3} ± {:.3} |", self.mean_auc, self.std_auc);
        s
    }

    pub fn write(&self, json_path: &Path, markdown_path: &Path, row_name: &str) -> Result<()> {
        std::fs::write(json_path, serde_json::to_vec_pretty(self)?).map_err(|e| YganError::io(json_path, e))?;
        std::fs::write(markdown_path, self.markdown(row_name)).map_err(|e| YganError::io(markdown_path, e))
    }
}

/// Builds the score method for a trained bundle, deriving prototype tables
/// from the training split where the method needs them.
pub fn prepare_method<T: Scalar>(
    bundle: &ModelBundle<T>,
    kind: ScoreKind,
    train_set: &ImageSet,
    seed: u64,
) -> Result<ScoreMethod> {
    let prototypes = match kind {
        ScoreKind::SZp => {
            let codes = semantic_codes(bundle, train_set, 256)?;
            Some(compute_prototypes(&codes, &train_set.labels, bundle.config.num_classes)?)
        }
        ScoreKind::SZw => {
            let codes = semantic_codes(bundle, train_set, 256)?;
            let k = bundle.config.num_classes;
            let clusters = kmeans(&codes, k, seed, 300, 1e-4)?;
            Some(compute_prototypes(&codes, &clusters.assignments, k)?)
        }
        _ => None,
    };
    ScoreMethod::new(kind, prototypes)
}

/// Protocol options for [`run_protocol`].
#[derive(Clone, Debug)]
pub struct ProtocolConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub method: ScoreKind,
    /// Anomalous class of each run, in order.
    pub anomaly_classes: Vec<usize>,
}

/// For each listed class: split with that class anomalous, train, score
/// the held-out set and evaluate. Failed runs are reported and skipped.
pub fn run_protocol(dataset: &ImageSet, config: &ProtocolConfig) -> Result<ProtocolReport> {
    let present = dataset.classes();
    ensure!(
        config.anomaly_classes.iter().all(|c| present.contains(c)),
        Protocol,
        "anomaly classes {:?} are not all present in the dataset {:?}",
        config.anomaly_classes,
        present
    );
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for &class in &config.anomaly_classes {
        match protocol_run(dataset, config, class) {
            Ok(r) => runs.push(r),
            Err(e) => {
                warn!("protocol run with class {class} anomalous failed: {e}");
                failures.push((class, e.to_string()));
            }
        }
    }
    if !failures.is_empty() {
        warn!("aggregating over {} of {} runs", runs.len(), config.anomaly_classes.len());
    }
    ProtocolReport::from_runs(runs, failures)
}

fn protocol_run(dataset: &ImageSet, config: &ProtocolConfig, class: usize) -> Result<RunResult> {
    let split = k_classes_out_split(
        dataset,
        &SplitSpec {
            anomaly_class: AnomalyClass::Class(class),
            ..config.split.clone()
        },
    )?;
    let model = ModelConfig {
        num_classes: split.num_classes(),
        ..config.model.clone()
    };
    let outcome = train::<f32>(&model, &config.train, &split.train, &TrainOptions::default())?;
    let bundle = &outcome.checkpoint.bundle;
    let method = prepare_method(bundle, config.method, &split.train, config.train.seed)?;
    let report = score_dataset(bundle, &split.test, &method, 256)?;
    evaluate_scores(
        &report.scores(),
        &report.labels(),
        &split.test.labels,
        Some(class),
        config.train.seed,
        config.method,
    )
}

/// Held-out accuracies of linear probes on frozen codes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub acc_digit_from_zs: f64,
    pub acc_digit_from_zr: f64,
    pub acc_color_from_zr: f64,
    pub acc_color_from_zs: f64,
}

/// Fraction of probe samples used for fitting; the rest measure accuracy.
pub const PROBE_TRAIN_FRACTION: f64 = 0.7;

/// Fits four multinomial logistic probes (digit and color from each code)
/// on a seeded split of `set` and reports held-out accuracy.
pub fn probe_disentanglement<T: Scalar>(
    bundle: &ModelBundle<T>,
    set: &ImageSet,
    colors: &[usize],
    seed: u64,
) -> Result<ProbeReport> {
    ensure!(colors.len() == set.len(), Input, "{} color labels for {} samples", colors.len(), set.len());
    let mut zs = Vec::with_capacity(set.len());
    let mut zr = Vec::with_capacity(set.len());
    for idx in sequential_batches(set.len(), 256) {
        let (s, r) = bundle.encode(&set.batch::<T>(&idx))?;
        let r = r.ok_or_else(|| YganError::Config("probing needs a model with a residual code".into()))?;
        for i in 0..idx.len() {
            zs.push(s.row(i).iter().map(|v| v.to_f64().unwrap()).collect());
            zr.push(r.row(i).iter().map(|v| v.to_f64().unwrap()).collect());
        }
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (set.len() as f64 * PROBE_TRAIN_FRACTION).round() as usize;
    let (fit, held) = order.split_at(cut);
    ensure!(!fit.is_empty() && !held.is_empty(), Protocol, "too few samples to fit and test probes");
    let probe = |features: &[Vec<f64>], labels: &[usize]| -> Result<f64> {
        let model = LogisticProbe::fit(&pick(features, fit), &pick(labels, fit))?;
        Ok(model.accuracy(&pick(features, held), &pick(labels, held)))
    };
    Ok(ProbeReport {
        acc_digit_from_zs: probe(&zs, &set.labels)?,
        acc_digit_from_zr: probe(&zr, &set.labels)?,
        acc_color_from_zr: probe(&zr, colors)?,
        acc_color_from_zs: probe(&zs, colors)?,
    })
}

fn pick<V: Clone>(items: &[V], index: &[usize]) -> Vec<V> {
    index.iter().map(|&i| items[i].clone()).collect()
}

/// Multinomial logistic regression on standardized features, fitted by
/// full-batch gradient descent with momentum and a small L2 penalty.
#[derive(Clone, Debug)]
pub struct LogisticProbe {
    classes: Vec<usize>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `(classes, dim + 1)`, bias last.
    weights: Vec<Vec<f64>>,
}

impl LogisticProbe {
    const ITERATIONS: usize = 500;
    const STEP: f64 = 0.5;
    const MOMENTUM: f64 = 0.9;
    const L2: f64 = 1e-4;

    pub fn fit(features: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        ensure!(features.len() == labels.len() && !features.is_empty(), Input, "probe needs matching, nonempty inputs");
        let mut classes = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        ensure!(classes.len() >= 2, Protocol, "probe labels are degenerate (a single class)");
        let dim = features[0].len();
        let n = features.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|d| features.iter().map(|f| f[d]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..dim)
            .map(|d| {
                let var = features.iter().map(|f| (f[d] - mean[d]).powi(2)).sum::<f64>() / n;
                if var > 1e-12 { var.sqrt() } else { 1.0 }
            })
            .collect();
        let mut probe = LogisticProbe {
            classes,
            mean,
            scale,
            weights: Vec::new(),
        };
        let x: Vec<Vec<f64>> = features.iter().map(|f| probe.standardize(f)).collect();
        let y: Vec<usize> = labels.iter().map(|l| probe.classes.binary_search(l).unwrap()).collect();
        let k = probe.classes.len();
        let mut w = vec![vec![0.0; dim + 1]; k];
        let mut velocity = vec![vec![0.0; dim + 1]; k];
        for _ in 0..Self::ITERATIONS {
            let mut grad = vec![vec![0.0; dim + 1]; k];
            for (xi, &yi) in x.iter().zip(&y) {
                let p = softmax_probs(&w, xi);
                for c in 0..k {
                    let err = p[c] - if c == yi { 1.0 } else { 0.0 };
                    let row = &mut grad[c];
                    for d in 0..dim {
                        row[d] += err * xi[d];
                    }
                    row[dim] += err;
                }
            }
            for c in 0..k {
                for d in 0..=dim {
                    let reg = if d < dim { Self::L2 * w[c][d] } else { 0.0 };
                    let g = grad[c][d] / n + reg;
                    velocity[c][d] = Self::MOMENTUM * velocity[c][d] - Self::STEP * g;
                    w[c][d] += velocity[c][d];
                }
            }
        }
        probe.weights = w;
        Ok(probe)
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        let mut v: Vec<f64> = f.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) / s).collect();
        v.push(1.0);
        v
    }

    pub fn predict(&self, features: &[f64]) -> usize {
        let p = softmax_probs(&self.weights, &self.standardize(features));
        let best = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        self.classes[best]
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = features.iter().zip(labels).filter(|(f, &l)| self.predict(f) == l).count();
        hits as f64 / labels.len().max(1) as f64
    }
}

/// Class probabilities for a bias-augmented feature vector.
fn softmax_probs(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
    crate::scoring::softmax(&logits)
}
