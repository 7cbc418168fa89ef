//! Loss terms of the generator and discriminator objectives.
//!
//! Every term reduces by the batch mean so the weights do not depend on
//! batch size. Each term exists both as a differentiable graph operation
//! (`*_node`) and as a plain evaluation on arrays.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Backward, Graph, NodeId, Scalar, Tensor};
use crate::error::{ensure, Result, YganError};

/// Probability clamp used by the discriminator cross-entropy.
pub const BCE_EPS: f64 = 1e-7;
/// Lower bound on the norm product in the cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Reconstruction.
    pub lambda1: f64,
    /// Feature matching.
    pub lambda2: f64,
    /// Semantic classification.
    pub lambda3: f64,
    /// Residual confusion.
    pub lambda4: f64,
    /// Consistency.
    pub lambda5: f64,
    /// Discriminator cross-entropy.
    pub lambda6: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 50.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 50.0,
            lambda6: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
            self.lambda6,
        ];
        ensure!(
            all.iter().all(|w| w.is_finite() && *w >= 0.0),
            Config,
            "loss weights must be finite and nonnegative: {:?}",
            all
        );
        Ok(())
    }
}

/// Scalar values of one training step. Inactive terms are reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub adv: f64,
    pub bce: f64,
    pub cls_s: f64,
    pub cls_r: f64,
    pub con: f64,
    pub total_g: f64,
    /// Absent when the model has no discriminator.
    pub total_d: Option<f64>,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("rec", self.rec),
            ("adv", self.adv),
            ("bce", self.bce),
            ("cls_s", self.cls_s),
            ("cls_r", self.cls_r),
            ("con", self.con),
        ]
    }

    /// First non-finite component, if any.
    pub fn check_finite(&self) -> Result<()> {
        let totals = [("total_G", self.total_g), ("total_D", self.total_d.unwrap_or(0.0))];
        for (term, value) in self.terms().into_iter().chain(totals) {
            if !value.is_finite() {
                return Err(YganError::NonFinite {
                    term: term.to_string(),
                    value,
                });
            }
        }
        Ok(())
    }
}

/// `λ1·rec + λ2·adv + λ3·cls_s + λ4·cls_r + λ5·con`.
pub fn generator_objective(b: &LossBreakdown, w: &LossWeights) -> f64 {
    w.lambda1 * b.rec + w.lambda2 * b.adv + w.lambda3 * b.cls_s + w.lambda4 * b.cls_r + w.lambda5 * b.con
}

/// `λ1·rec + λ6·bce`. The reconstruction term carries no discriminator gradient.
pub fn discriminator_objective(b: &LossBreakdown, w: &LossWeights) -> f64 {
    w.lambda1 * b.rec + w.lambda6 * b.bce
}

fn same_shape<T: Scalar>(g: &Graph<T>, a: NodeId, b: NodeId, what: &str) -> Result<()> {
    ensure!(
        g.shape(a) == g.shape(b) && !g.value(a).is_empty(),
        Input,
        "{}: shapes {:?} and {:?} differ",
        what,
        g.shape(a),
        g.shape(b)
    );
    Ok(())
}

fn as_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

struct MeanAbsDiff;

impl<T: Scalar> Backward<T> for MeanAbsDiff {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let scale = grad.item() / T::from_usize(inputs[0].len()).expect("count");
        let sign = |d: T| {
            if d > T::zero() {
                scale
            } else if d < T::zero() {
                -scale
            } else {
                T::zero()
            }
        };
        // d/d(x_hat) of |x - x_hat|
        let dxhat = inputs[1].zip_map(inputs[0], |xh, x| sign(xh - x));
        vec![needs[0].then(|| dxhat.scale(-T::one())), needs[1].then_some(dxhat)]
    }
}

/// Mean absolute difference between an image batch and its reconstruction.
pub fn reconstruction_node<T: Scalar>(g: &mut Graph<T>, x: NodeId, x_hat: NodeId) -> Result<NodeId> {
    same_shape(g, x, x_hat, "reconstruction loss")?;
    let (a, b) = (g.value(x), g.value(x_hat));
    let sum: T = a.data().iter().zip(b.data()).map(|(&p, &q)| (p - q).abs()).sum();
    let value = sum / T::from_usize(a.len()).expect("count");
    Ok(g.record(&[x, x_hat], Tensor::scalar(value), MeanAbsDiff))
}

struct MeanSquaredDiff;

impl<T: Scalar> Backward<T> for MeanSquaredDiff {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let two = T::from_f64c(2.0);
        let scale = two * grad.item() / T::from_usize(inputs[0].len()).expect("count");
        let da = inputs[0].zip_map(inputs[1], |a, b| scale * (a - b));
        vec![needs[0].then(|| da.clone()), needs[1].then(|| da.scale(-T::one()))]
    }
}

/// Mean squared difference of discriminator features (feature matching).
pub fn adversarial_node<T: Scalar>(g: &mut Graph<T>, f_x: NodeId, f_xhat: NodeId) -> Result<NodeId> {
    same_shape(g, f_x, f_xhat, "adversarial loss")?;
    let (a, b) = (g.value(f_x), g.value(f_xhat));
    let sum: T = a.data().iter().zip(b.data()).map(|(&p, &q)| (p - q) * (p - q)).sum();
    let value = sum / T::from_usize(a.len()).expect("count");
    Ok(g.record(&[f_x, f_xhat], Tensor::scalar(value), MeanSquaredDiff))
}

struct BinaryCrossEntropy<T> {
    eps: T,
}

impl<T: Scalar> Backward<T> for BinaryCrossEntropy<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let n = T::from_usize(inputs[0].len()).expect("count");
        let scale = grad.item() / n;
        let (lo, hi) = (self.eps, T::one() - self.eps);
        let inside = |p: T| p > lo && p < hi;
        let dreal = inputs[0].map(|p| if inside(p) { -scale / p } else { T::zero() });
        let dfake = inputs[1].map(|p| if inside(p) { scale / (T::one() - p) } else { T::zero() });
        vec![needs[0].then_some(dreal), needs[1].then_some(dfake)]
    }
}

/// `-mean[log D(x) + log(1 - D(x̂))]` with probabilities clamped to `[eps, 1 - eps]`.
pub fn discriminator_bce_node<T: Scalar>(g: &mut Graph<T>, real_prob: NodeId, fake_prob: NodeId) -> Result<NodeId> {
    same_shape(g, real_prob, fake_prob, "discriminator cross-entropy")?;
    let eps = T::from_f64c(BCE_EPS);
    let clamp = |p: T| p.max(eps).min(T::one() - eps);
    let (r, f) = (g.value(real_prob), g.value(fake_prob));
    let sum: T = r
        .data()
        .iter()
        .zip(f.data())
        .map(|(&pr, &pf)| clamp(pr).ln() + (T::one() - clamp(pf)).ln())
        .sum();
    let value = -sum / T::from_usize(r.len()).expect("count");
    Ok(g.record(&[real_prob, fake_prob], Tensor::scalar(value), BinaryCrossEntropy { eps }))
}

/// Row-wise softmax of a `(B, N)` array.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let n = logits.dim(1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

struct CrossEntropy {
    labels: Vec<usize>,
}

impl<T: Scalar> Backward<T> for CrossEntropy {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let logits = inputs[0];
        let n = logits.dim(1);
        let scale = grad.item() / T::from_usize(self.labels.len()).expect("count");
        let mut d = softmax_rows(logits);
        for (row, &y) in d.data_mut().chunks_mut(n).zip(&self.labels) {
            row[y] = row[y] - T::one();
            for v in row.iter_mut() {
                *v = *v * scale;
            }
        }
        vec![Some(d)]
    }
}

/// Mean softmax cross-entropy of `(B, N)` logits against integer labels.
pub fn cross_entropy_node<T: Scalar>(g: &mut Graph<T>, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    ensure!(
        shape.len() == 2 && shape[0] == labels.len() && shape[0] > 0,
        Input,
        "logits {:?} do not match {} labels",
        shape,
        labels.len()
    );
    let n = shape[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(YganError::Input(format!("label {bad} out of range for {n} classes")));
    }
    let mut total = T::zero();
    for (row, &y) in g.value(logits).data().chunks(n).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        total = total + lse - row[y];
    }
    let value = total / T::from_usize(labels.len()).expect("count");
    Ok(g.record(&[logits], Tensor::scalar(value), CrossEntropy { labels: labels.to_vec() }))
}

/// Semantic classification loss: cross-entropy of `C(z_s)`.
pub fn semantic_classification_node<T: Scalar>(g: &mut Graph<T>, logits_s: NodeId, labels: &[usize]) -> Result<NodeId> {
    cross_entropy_node(g, logits_s, labels)
}

/// Residual confusion loss: the same cross-entropy, applied to logits
/// computed behind a gradient-reversal layer.
pub fn residual_confusion_node<T: Scalar>(g: &mut Graph<T>, logits_r: NodeId, labels: &[usize]) -> Result<NodeId> {
    cross_entropy_node(g, logits_r, labels)
}

struct NegCosine<T> {
    eps: T,
}

impl<T: Scalar> Backward<T> for NegCosine<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (rows, d) = (a.dim(0), a.dim(1));
        let scale = -grad.item() / T::from_usize(rows).expect("count");
        let mut da = Tensor::zeros(a.shape());
        let mut db = Tensor::zeros(b.shape());
        for r in 0..rows {
            let (ar, br) = (a.row(r), b.row(r));
            let dot: T = ar.iter().zip(br).map(|(&p, &q)| p * q).sum();
            let na2: T = ar.iter().map(|&p| p * p).sum();
            let nb2: T = br.iter().map(|&q| q * q).sum();
            let prod = na2.sqrt() * nb2.sqrt();
            let out_a = &mut da.data_mut()[r * d..(r + 1) * d];
            if prod > self.eps {
                let cos = dot / prod;
                for i in 0..d {
                    out_a[i] = scale * (br[i] / prod - cos * ar[i] / na2);
                }
                let out_b = &mut db.data_mut()[r * d..(r + 1) * d];
                for i in 0..d {
                    out_b[i] = scale * (ar[i] / prod - cos * br[i] / nb2);
                }
            } else {
                for i in 0..d {
                    out_a[i] = scale * br[i] / self.eps;
                }
                let out_b = &mut db.data_mut()[r * d..(r + 1) * d];
                for i in 0..d {
                    out_b[i] = scale * ar[i] / self.eps;
                }
            }
        }
        vec![needs[0].then_some(da), needs[1].then_some(db)]
    }
}

/// Batch mean of `-cos(z_s, ẑ'_s)`.
pub fn consistency_node<T: Scalar>(g: &mut Graph<T>, z_s: NodeId, z_s_hat: NodeId) -> Result<NodeId> {
    same_shape(g, z_s, z_s_hat, "consistency loss")?;
    ensure!(g.shape(z_s).len() == 2, Input, "consistency loss expects (B, d) codes");
    let eps = T::from_f64c(COSINE_EPS);
    let (a, b) = (g.value(z_s), g.value(z_s_hat));
    let rows = a.dim(0);
    let mut total = T::zero();
    for r in 0..rows {
        let (ar, br) = (a.row(r), b.row(r));
        let dot: T = ar.iter().zip(br).map(|(&p, &q)| p * q).sum();
        let na: T = ar.iter().map(|&p| p * p).sum::<T>().sqrt();
        let nb: T = br.iter().map(|&q| q * q).sum::<T>().sqrt();
        total = total - dot / (na * nb).max(eps);
    }
    let value = total / T::from_usize(rows).expect("count");
    Ok(g.record(&[z_s, z_s_hat], Tensor::scalar(value), NegCosine { eps }))
}

fn eval2<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl FnOnce(&mut Graph<T>, NodeId, NodeId) -> Result<NodeId>,
) -> Result<f64> {
    let mut g = Graph::new();
    let (na, nb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = f(&mut g, na, nb)?;
    Ok(as_f64(g.value(out).item()))
}

pub fn reconstruction_loss<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    eval2(x, x_hat, reconstruction_node)
}

pub fn adversarial_loss<T: Scalar>(f_x: &Tensor<T>, f_xhat: &Tensor<T>) -> Result<f64> {
    eval2(f_x, f_xhat, adversarial_node)
}

pub fn discriminator_bce<T: Scalar>(real_prob: &Tensor<T>, fake_prob: &Tensor<T>) -> Result<f64> {
    eval2(real_prob, fake_prob, discriminator_bce_node)
}

pub fn semantic_classification_loss<T: Scalar>(logits_s: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let n = g.constant(logits_s.clone());
    let out = semantic_classification_node(&mut g, n, labels)?;
    Ok(as_f64(g.value(out).item()))
}

pub fn residual_confusion_loss<T: Scalar>(logits_r: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let n = g.constant(logits_r.clone());
    let out = residual_confusion_node(&mut g, n, labels)?;
    Ok(as_f64(g.value(out).item()))
}

pub fn consistency_loss<T: Scalar>(z_s: &Tensor<T>, z_s_hat: &Tensor<T>) -> Result<f64> {
    eval2(z_s, z_s_hat, consistency_node)
}

/// Uniformly random derangement of `0..batch_size`, drawn by rejection
/// from uniform permutations.
pub fn shuffle_residuals<R: Rng + ?Sized>(batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if batch_size < 2 {
        return Err(YganError::Protocol(format!(
            "residual shuffling needs a batch of at least two samples, got {batch_size}; \
             otherwise the consistency loss has no effect"
        )));
    }
    let mut perm: Vec<usize> = (0..batch_size).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}
