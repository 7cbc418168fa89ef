//! Anomaly scores: the classifier-confidence score used at inference and the
//! alternative reconstruction-, latent-, prototype- and entropy-based scores.
//!
//! Higher means more anomalous for every method. Distances reduce by sum.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tensor};
use crate::data::{sequential_batches, ImageSet};
use crate::error::{ensure, Result, YganError};
use crate::losses::softmax_rows;
use crate::model::ModelBundle;

/// Guard against division by zero when unit-normalizing codes.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreKind {
    #[serde(rename = "s")]
    S,
    #[serde(rename = "s_x")]
    SX,
    #[serde(rename = "s_z")]
    SZ,
    #[serde(rename = "s_zs")]
    SZs,
    #[serde(rename = "s_zp")]
    SZp,
    #[serde(rename = "s_zw")]
    SZw,
    #[serde(rename = "s_c")]
    SC,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 7] = [
        ScoreKind::S,
        ScoreKind::SX,
        ScoreKind::SZ,
        ScoreKind::SZs,
        ScoreKind::SZp,
        ScoreKind::SZw,
        ScoreKind::SC,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::S => "s",
            ScoreKind::SX => "s_x",
            ScoreKind::SZ => "s_z",
            ScoreKind::SZs => "s_zs",
            ScoreKind::SZp => "s_zp",
            ScoreKind::SZw => "s_zw",
            ScoreKind::SC => "s_c",
        }
    }

    pub fn needs_prototypes(self) -> bool {
        matches!(self, ScoreKind::SZp | ScoreKind::SZw)
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreKind {
    type Err = YganError;

    fn from_str(s: &str) -> Result<Self> {
        ScoreKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| YganError::Config(format!("unknown score method {s:?}")))
    }
}

/// Per-class means of unit-normalized semantic codes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub centers: Vec<Vec<f64>>,
    /// Classes whose normalized codes cancel to (nearly) the zero vector.
    pub degenerate: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMethod {
    pub kind: ScoreKind,
    pub prototypes: Option<Prototypes>,
}

impl ScoreMethod {
    pub fn new(kind: ScoreKind, prototypes: Option<Prototypes>) -> Result<Self> {
        ensure!(
            kind.needs_prototypes() == prototypes.is_some(),
            Config,
            "score method {} {} a prototype table",
            kind,
            if kind.needs_prototypes() { "requires" } else { "does not take" }
        );
        Ok(ScoreMethod { kind, prototypes })
    }

    pub fn simple(kind: ScoreKind) -> Result<Self> {
        ScoreMethod::new(kind, None)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// `1 - max_i softmax(logits)_i`.
pub fn confidence_score(logits: &[f64]) -> f64 {
    1.0 - softmax(logits).into_iter().fold(0.0, f64::max)
}

/// Shannon entropy of `softmax(logits)` in nats.
pub fn entropy_score(logits: &[f64]) -> f64 {
    softmax(logits).into_iter().filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum()
}

/// `||x - x_hat||²`, summed over every element.
pub fn score_image(x: &[f64], x_hat: &[f64]) -> f64 {
    x.iter().zip(x_hat).map(|(a, b)| (a - b).powi(2)).sum()
}

pub fn unit_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    v.iter().map(|x| x / norm).collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Squared distance between unit-normalized codes.
pub fn score_latent(z: &[f64], z_hat: &[f64]) -> f64 {
    squared_distance(&unit_normalize(z), &unit_normalize(z_hat))
}

/// Minimum squared distance from the normalized code to any prototype.
pub fn score_prototype(z_s: &[f64], prototypes: &Prototypes) -> f64 {
    let z = unit_normalize(z_s);
    prototypes
        .centers
        .iter()
        .map(|c| squared_distance(&z, c))
        .fold(f64::INFINITY, f64::min)
}

/// Mean normalized code of every class `0..num_classes`.
pub fn compute_prototypes(latents: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<Prototypes> {
    ensure!(latents.len() == labels.len(), Input, "{} codes for {} labels", latents.len(), labels.len());
    ensure!(!latents.is_empty(), Protocol, "no codes to build prototypes from");
    let dim = latents[0].len();
    let mut sums = vec![vec![0.0; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (z, &y) in latents.iter().zip(labels) {
        ensure!(y < num_classes, Input, "label {} outside 0..{}", y, num_classes);
        for (s, v) in sums[y].iter_mut().zip(unit_normalize(z)) {
            *s += v;
        }
        counts[y] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(YganError::Protocol(format!("class {empty} has no samples for its prototype")));
    }
    let centers: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect();
    let degenerate = centers
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6)
        .collect();
    Ok(Prototypes { centers, degenerate })
}

fn rows<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let n = t.dim(0);
    (0..n).map(|i| t.row(i).iter().map(|v| v.to_f64().unwrap()).collect()).collect()
}

fn concat_rows(a: Vec<Vec<f64>>, b: Option<Vec<Vec<f64>>>) -> Vec<Vec<f64>> {
    match b {
        Some(b) => a.into_iter().zip(b).map(|(mut x, y)| {
            x.extend(y);
            x
        }).collect(),
        None => a,
    }
}

fn classifier_logits<T: Scalar>(bundle: &ModelBundle<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    ensure!(bundle.has_classifier(), Config, "this model has no classifier; use a reconstruction or latent score");
    bundle.classify(&bundle.encode_semantic(x)?)
}

/// Inference score for a batch; evaluates only `E_s` and the classifier.
pub fn anomaly_score<T: Scalar>(bundle: &ModelBundle<T>, x: &Tensor<T>) -> Result<Vec<f64>> {
    let p = softmax_rows(&classifier_logits(bundle, x)?);
    Ok(rows(&p)
        .into_iter()
        .map(|r| 1.0 - r.into_iter().fold(0.0, f64::max))
        .collect())
}

pub fn score_entropy<T: Scalar>(bundle: &ModelBundle<T>, x: &Tensor<T>) -> Result<Vec<f64>> {
    Ok(rows(&classifier_logits(bundle, x)?).iter().map(|l| entropy_score(l)).collect())
}

/// Scores of one batch with any method.
pub fn score_batch<T: Scalar>(bundle: &ModelBundle<T>, x: &Tensor<T>, method: &ScoreMethod) -> Result<Vec<f64>> {
    match method.kind {
        ScoreKind::S => anomaly_score(bundle, x),
        ScoreKind::SC => score_entropy(bundle, x),
        ScoreKind::SX => {
            let x_hat = bundle.reconstruct(x)?;
            Ok(rows(&x.clone().reshaped(&[x.dim(0), x.len() / x.dim(0)])?)
                .iter()
                .zip(rows(&x_hat.reshaped(&[x.dim(0), x.len() / x.dim(0)])?))
                .map(|(a, b)| score_image(a, &b))
                .collect())
        }
        ScoreKind::SZ | ScoreKind::SZs => {
            let x_hat = bundle.reconstruct(x)?;
            let (zs, zr) = bundle.encode(x)?;
            let (zs_hat, zr_hat) = bundle.encode(&x_hat)?;
            let (z, z_hat) = if method.kind == ScoreKind::SZ {
                (concat_rows(rows(&zs), zr.map(|t| rows(&t))), concat_rows(rows(&zs_hat), zr_hat.map(|t| rows(&t))))
            } else {
                (rows(&zs), rows(&zs_hat))
            };
            Ok(z.iter().zip(&z_hat).map(|(a, b)| score_latent(a, b)).collect())
        }
        ScoreKind::SZp | ScoreKind::SZw => {
            let protos = method
                .prototypes
                .as_ref()
                .ok_or_else(|| YganError::Config(format!("score method {} needs prototypes", method.kind)))?;
            let zs = rows(&bundle.encode_semantic(x)?);
            ensure!(
                protos.centers.first().map(|c| c.len()) == zs.first().map(|z| z.len()),
                Config,
                "prototype width does not match the semantic code width"
            );
            Ok(zs.iter().map(|z| score_prototype(z, protos)).collect())
        }
    }
}

/// Semantic codes of every sample in `set`, evaluated in batches.
pub fn semantic_codes<T: Scalar>(bundle: &ModelBundle<T>, set: &ImageSet, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(set.len());
    for idx in sequential_batches(set.len(), batch_size) {
        out.extend(rows(&bundle.encode_semantic(&set.batch::<T>(&idx))?));
    }
    Ok(out)
}

/// Prototype table from the semantic codes of `set` under `labels`
/// (ground-truth labels give `s_zp`, cluster assignments give `s_zw`).
pub fn prototypes_for<T: Scalar>(
    bundle: &ModelBundle<T>,
    set: &ImageSet,
    labels: &[usize],
    num_classes: usize,
    batch_size: usize,
) -> Result<Prototypes> {
    compute_prototypes(&semantic_codes(bundle, set, batch_size)?, labels, num_classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_id: usize,
    pub score: f64,
    /// 1 for anomalous samples.
    pub label: u8,
}

/// Provenance written next to a score CSV.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreMeta {
    pub method: String,
    pub checkpoint: Option<String>,
    pub dataset: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub rows: Vec<ScoreRow>,
    pub meta: ScoreMeta,
}

impl ScoreReport {
    pub fn scores(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.score).collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.label == 1).collect()
    }

    /// Writes `path` as CSV and `path` with a `.json` extension as sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| YganError::io(path, e))?;
        let sidecar = path.with_extension("json");
        std::fs::write(&sidecar, serde_json::to_vec_pretty(&self.meta)?).map_err(|e| YganError::io(&sidecar, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<ScoreRow>, _>>()?;
        let sidecar = path.with_extension("json");
        let meta = serde_json::from_slice(&std::fs::read(&sidecar).map_err(|e| YganError::io(&sidecar, e))?)?;
        Ok(ScoreReport { rows, meta })
    }
}

/// Scores every sample of `set` in order.
pub fn score_dataset<T: Scalar>(
    bundle: &ModelBundle<T>,
    set: &ImageSet,
    method: &ScoreMethod,
    batch_size: usize,
) -> Result<ScoreReport> {
    if method.kind.needs_prototypes() && method.prototypes.is_none() {
        return Err(YganError::Config(format!("score method {} needs prototypes", method.kind)));
    }
    let mut rows = Vec::with_capacity(set.len());
    for idx in sequential_batches(set.len(), batch_size) {
        let scores = score_batch(bundle, &set.batch::<T>(&idx), method)?;
        for (&i, score) in idx.iter().zip(scores) {
            if !score.is_finite() {
                return Err(YganError::NonFinite {
                    term: format!("score of sample {}", set.ids[i]),
                    value: score,
                });
            }
            rows.push(ScoreRow {
                sample_id: set.ids[i],
                score,
                label: set.anomalous[i] as u8,
            });
        }
    }
    Ok(ScoreReport {
        rows,
        meta: ScoreMeta {
            method: method.kind.name().to_string(),
            ..Default::default()
        },
    })
}
