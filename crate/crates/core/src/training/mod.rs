//! Alternating generator/discriminator optimization, the ablation variants,
//! the warm-up schedule of the gradient-reversal weight, and checkpoints.

mod checkpoint;

use std::fmt;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::autograd::{Graph, Leaf, NodeId, Scalar, Tensor};
use crate::data::{batches, ImageSet};
use crate::error::{ensure, Result, YganError};
use crate::eval::auc;
use crate::losses::{
    adversarial_node, consistency_node, discriminator_bce_node, discriminator_objective, generator_objective,
    reconstruction_node, residual_confusion_node, semantic_classification_node, shuffle_residuals, LossBreakdown,
    LossWeights,
};
use crate::model::{grad_reverse, Architecture, ModelBundle, ModelConfig};
use crate::nn::{Adam, AdamConfig, Mode, Network, ParamStore};
use crate::scoring::{score_dataset, ScoreKind, ScoreMethod};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    #[serde(rename = "full", alias = "Full")]
    Full,
    A1,
    A2,
    A3,
    B1,
    B2,
    B3,
    B4,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::Full,
        Ablation::A1,
        Ablation::A2,
        Ablation::A3,
        Ablation::B1,
        Ablation::B2,
        Ablation::B3,
        Ablation::B4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::A1 => "A1",
            Ablation::A2 => "A2",
            Ablation::A3 => "A3",
            Ablation::B1 => "B1",
            Ablation::B2 => "B2",
            Ablation::B3 => "B3",
            Ablation::B4 => "B4",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = YganError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| YganError::Config(format!("unknown ablation variant {s:?}")))
    }
}

/// Which loss terms enter the objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveLosses {
    pub rec: bool,
    pub adv: bool,
    pub bce: bool,
    pub cls_s: bool,
    pub cls_r: bool,
    pub con: bool,
}

impl ActiveLosses {
    pub const ALL: ActiveLosses = ActiveLosses {
        rec: true,
        adv: true,
        bce: true,
        cls_s: true,
        cls_r: true,
        con: true,
    };

    pub fn names(&self) -> Vec<&'static str> {
        [
            ("rec", self.rec),
            ("adv", self.adv),
            ("bce", self.bce),
            ("cls_s", self.cls_s),
            ("cls_r", self.cls_r),
            ("con", self.con),
        ]
        .into_iter()
        .filter(|(_, on)| *on)
        .map(|(n, _)| n)
        .collect()
    }
}

/// Effective model structure, objectives and score of a variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationPlan {
    pub arch: Architecture,
    pub losses: ActiveLosses,
    pub score: ScoreKind,
}

pub fn apply_ablation(variant: Ablation) -> AblationPlan {
    let full = AblationPlan {
        arch: Architecture::FULL,
        losses: ActiveLosses::ALL,
        score: ScoreKind::S,
    };
    let single = Architecture {
        dual_encoders: false,
        ..Architecture::FULL
    };
    let no_latent = ActiveLosses {
        cls_r: false,
        con: false,
        ..ActiveLosses::ALL
    };
    match variant {
        Ablation::Full => full,
        Ablation::A1 => AblationPlan {
            losses: ActiveLosses {
                con: false,
                ..ActiveLosses::ALL
            },
            ..full
        },
        Ablation::A2 => AblationPlan {
            losses: ActiveLosses {
                cls_r: false,
                ..ActiveLosses::ALL
            },
            ..full
        },
        Ablation::A3 => AblationPlan {
            losses: no_latent,
            ..full
        },
        Ablation::B1 => AblationPlan { arch: single, ..full },
        Ablation::B2 => AblationPlan {
            arch: Architecture {
                residual_code: false,
                ..single
            },
            losses: no_latent,
            ..full
        },
        Ablation::B3 => AblationPlan {
            arch: Architecture {
                residual_code: false,
                classifier: false,
                ..single
            },
            losses: ActiveLosses {
                cls_s: false,
                ..no_latent
            },
            score: ScoreKind::SX,
        },
        Ablation::B4 => AblationPlan {
            arch: Architecture {
                discriminator: false,
                ..Architecture::FULL
            },
            losses: ActiveLosses {
                adv: false,
                bce: false,
                ..ActiveLosses::ALL
            },
            ..full
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    #[serde(alias = "lambda_R_gamma")]
    pub lambda_r_gamma: f64,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            lambda_r_gamma: 10.0,
            seed: 0,
            ablation: Ablation::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, Config, "epochs must be at least 1");
        let min_batch = if apply_ablation(self.ablation).losses.con { 2 } else { 1 };
        ensure!(
            self.batch_size >= min_batch,
            Config,
            "batch_size must be at least {} for variant {}, got {}",
            min_batch,
            self.ablation,
            self.batch_size
        );
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Config,
            "learning_rate must be positive"
        );
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Config,
            "beta1 and beta2 must lie in [0, 1)"
        );
        ensure!(
            self.lambda_r_gamma >= 0.0 && self.lambda_r_gamma.is_finite(),
            Config,
            "lambda_r_gamma must be finite and nonnegative"
        );
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// `2 / (1 + exp(-gamma·p)) - 1` for training progress `p ∈ [0, 1]`.
pub fn lambda_r_schedule(progress: f64, gamma: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    2.0 / (1.0 + (-gamma * p).exp()) - 1.0
}

/// The tape of one training step with its objective nodes.
pub struct StepGraph<T: Scalar> {
    pub graph: Graph<T>,
    pub total_g: NodeId,
    pub total_d: Option<NodeId>,
    /// Component values; totals are recomputed in `f64` from the weights.
    pub losses: LossBreakdown,
    pub residual: Option<NodeId>,
    /// Input of the classifier on the residual path (after the reversal).
    pub reversed_residual: Option<NodeId>,
}

/// Records the forward pass of one step.
///
/// `reversal` is the gradient-reversal weight; `None` replaces the reversal
/// layer by an identity so the objective can be differentiated numerically.
/// `permutation` pairs each semantic code with another sample's residual
/// code and is required when the consistency loss is active.
pub fn build_step_graph<T: Scalar>(
    bundle: &ModelBundle<T>,
    losses: &ActiveLosses,
    weights: &LossWeights,
    x: &Tensor<T>,
    labels: &[usize],
    reversal: Option<f64>,
    permutation: Option<&[usize]>,
) -> Result<StepGraph<T>> {
    let batch = x.shape().first().copied().unwrap_or(0);
    ensure!(labels.len() == batch, Input, "{} labels for a batch of {}", labels.len(), batch);
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let codes = bundle.encode_nodes(&mut g, xn, Mode::Train)?;
    let x_hat = bundle.decode_nodes(&mut g, codes.semantic, codes.residual, Mode::Train)?;
    let mut b = LossBreakdown::default();
    let mut gen_terms = Vec::new();
    let mut disc_terms = Vec::new();
    let value = |g: &Graph<T>, n: NodeId| g.value(n).item().to_f64().unwrap();

    if losses.rec {
        let rec = reconstruction_node(&mut g, xn, x_hat)?;
        b.rec = value(&g, rec);
        gen_terms.push((rec, weights.lambda1));
        disc_terms.push((rec, weights.lambda1));
    }

    if bundle.has_discriminator() && (losses.adv || losses.bce) {
        let real = bundle.critic_nodes(&mut g, xn, Mode::Train)?;
        let fake = bundle.critic_nodes(&mut g, x_hat, Mode::Train)?;
        if losses.adv {
            let adv = adversarial_node(&mut g, real.features, fake.features)?;
            b.adv = value(&g, adv);
            gen_terms.push((adv, weights.lambda2));
        }
        if losses.bce {
            let bce = discriminator_bce_node(&mut g, real.realness, fake.realness)?;
            b.bce = value(&g, bce);
            disc_terms.push((bce, weights.lambda6));
        }
    }

    if bundle.has_classifier() && losses.cls_s {
        let logits = bundle.classify_node(&mut g, codes.semantic)?;
        let cls = semantic_classification_node(&mut g, logits, labels)?;
        b.cls_s = value(&g, cls);
        gen_terms.push((cls, weights.lambda3));
    }

    let mut reversed_residual = None;
    if let (true, true, Some(z_r)) = (bundle.has_classifier(), losses.cls_r, codes.residual) {
        let h = match reversal {
            Some(lambda) => grad_reverse(&mut g, z_r, lambda)?,
            None => z_r,
        };
        reversed_residual = Some(h);
        let logits = bundle.classify_node(&mut g, h)?;
        let conf = residual_confusion_node(&mut g, logits, labels)?;
        b.cls_r = value(&g, conf);
        gen_terms.push((conf, weights.lambda4));
    }

    if let (true, Some(z_r)) = (losses.con, codes.residual) {
        let perm = permutation
            .ok_or_else(|| YganError::Protocol("the consistency loss needs a residual permutation".into()))?;
        ensure!(perm.len() == batch, Input, "permutation of length {} for a batch of {}", perm.len(), batch);
        let shuffled = g.gather_rows(z_r, perm)?;
        let hybrid = bundle.decode_nodes(&mut g, codes.semantic, Some(shuffled), Mode::Train)?;
        let z_s_hat = bundle.semantic_node(&mut g, hybrid, Mode::Train)?;
        let con = consistency_node(&mut g, codes.semantic, z_s_hat)?;
        b.con = value(&g, con);
        gen_terms.push((con, weights.lambda5));
    }

    let total_g = g.weighted_sum(&gen_terms);
    let total_d = bundle.has_discriminator().then(|| g.weighted_sum(&disc_terms));
    b.total_g = generator_objective(&b, weights);
    b.total_d = total_d.map(|_| discriminator_objective(&b, weights));
    Ok(StepGraph {
        graph: g,
        total_g,
        total_d,
        losses: b,
        residual: codes.residual,
        reversed_residual,
    })
}

/// Whether `leaf` is a trainable parameter of one optimizer group.
fn in_group<T: Scalar>(store: &ParamStore<T>, leaf: Leaf, generator: bool) -> bool {
    match leaf {
        Leaf::Param(p) => {
            let e = store.entry(p);
            e.trainable && e.network.is_generator() == generator
        }
        _ => false,
    }
}

/// Complete training state: model, both optimizers, progress and the
/// random stream used for residual shuffling.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub bundle: ModelBundle<T>,
    pub train_config: TrainConfig,
    pub opt_g: Adam<T>,
    pub opt_d: Option<Adam<T>>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimization steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> Checkpoint<T> {
    /// Fresh state: parameters drawn from the training seed.
    pub fn new(model_config: &ModelConfig, train_config: &TrainConfig) -> Result<Self> {
        train_config.validate()?;
        let plan = apply_ablation(train_config.ablation);
        let bundle = ModelBundle::build(model_config, plan.arch, train_config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
        rng.set_stream(1);
        Ok(Self::assemble(bundle, train_config.clone(), rng))
    }

    pub(crate) fn assemble(bundle: ModelBundle<T>, train_config: TrainConfig, rng: ChaCha8Rng) -> Self {
        let adam = train_config.adam();
        let gen = bundle.store.trainable(Network::is_generator);
        let disc = bundle.store.trainable(|n| !n.is_generator());
        let opt_g = Adam::new(adam, &bundle.store, gen);
        let opt_d = bundle.has_discriminator().then(|| Adam::new(adam, &bundle.store, disc));
        Checkpoint {
            bundle,
            train_config,
            opt_g,
            opt_d,
            epoch: 0,
            step: 0,
            rng,
        }
    }

    pub fn plan(&self) -> AblationPlan {
        apply_ablation(self.train_config.ablation)
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.bundle.config
    }

    /// Rejects resuming under a model configuration the parameters do not fit.
    pub fn ensure_compatible(&self, model_config: &ModelConfig) -> Result<()> {
        let own = &self.bundle.config;
        ensure!(
            own.image_size == model_config.image_size,
            Config,
            "checkpoint was trained at image_size {}, the run requests {}",
            own.image_size,
            model_config.image_size
        );
        ensure!(
            own == model_config,
            Config,
            "checkpoint model configuration {:?} differs from the requested {:?}",
            own,
            model_config
        );
        Ok(())
    }
}

/// One optimization step: forward, losses, residual shuffling, then the
/// generator and discriminator updates from the same recorded pass.
pub fn train_step<T: Scalar>(state: &mut Checkpoint<T>, x: &Tensor<T>, labels: &[usize], lambda_r: f64) -> Result<LossBreakdown> {
    let plan = state.plan();
    let batch = x.shape().first().copied().unwrap_or(0);
    let permutation = if plan.losses.con && plan.arch.residual_code {
        Some(shuffle_residuals(batch, &mut state.rng)?)
    } else {
        None
    };
    let weights = state.train_config.weights;
    let mut step = build_step_graph(
        &state.bundle,
        &plan.losses,
        &weights,
        x,
        labels,
        Some(lambda_r),
        permutation.as_deref(),
    )?;
    step.losses.check_finite()?;

    let store = &state.bundle.store;
    let grads_g = step.graph.backward(step.total_g, |l| in_group(store, l, true));
    let grads_d = step.total_d.map(|d| step.graph.backward(d, |l| in_group(store, l, false)));

    let store = &mut state.bundle.store;
    step.graph.commit_running_updates(store);
    state.opt_g.update(store, &grads_g);
    if let (Some(opt), Some(grads)) = (state.opt_d.as_mut(), grads_d.as_ref()) {
        opt.update(store, grads);
    }
    state.step += 1;
    Ok(step.losses)
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub rec: f64,
    pub adv: f64,
    pub bce: f64,
    pub cls_s: f64,
    pub cls_r: f64,
    pub con: f64,
    #[serde(rename = "total_G")]
    pub total_g: f64,
    #[serde(rename = "total_D")]
    pub total_d: Option<f64>,
    #[serde(rename = "lambda_R")]
    pub lambda_r: f64,
}

impl StepRecord {
    fn new(step: u64, epoch: usize, b: &LossBreakdown, lambda_r: f64) -> Self {
        StepRecord {
            step,
            epoch,
            rec: b.rec,
            adv: b.adv,
            bce: b.bce,
            cls_s: b.cls_s,
            cls_r: b.cls_r,
            con: b.con,
            total_g: b.total_g,
            total_d: b.total_d,
            lambda_r,
        }
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Where and how a training run reports progress.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Receives `last.ckpt`, `best.ckpt` (with validation) and `loss.csv`.
    pub out_dir: Option<PathBuf>,
    /// Held-out samples with anomaly flags for best-checkpoint selection.
    pub validation: Option<&'a ImageSet>,
    /// Stop after this many epochs of the schedule have completed, leaving
    /// the schedule itself untouched (used to interrupt and resume).
    pub stop_after_epoch: Option<usize>,
}

pub struct TrainOutcome<T: Scalar> {
    pub checkpoint: Checkpoint<T>,
    pub history: Vec<StepRecord>,
    /// Validation AUC per completed epoch, when a validation set was given.
    pub validation_auc: Vec<f64>,
}

/// Trains a fresh model for `train_config.epochs` epochs.
pub fn train<T: Scalar>(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    dataset: &ImageSet,
    options: &TrainOptions,
) -> Result<TrainOutcome<T>> {
    ensure!(
        dataset.classes().iter().all(|&c| c < model_config.num_classes),
        Protocol,
        "dataset labels exceed num_classes {}",
        model_config.num_classes
    );
    resume(Checkpoint::new(model_config, train_config)?, dataset, options)
}

/// Continues training from `state.epoch` to the end of the schedule.
///
/// The data order of epoch `e` depends only on the seed and `e`, and the
/// shuffling stream is part of the state, so resuming reproduces an
/// uninterrupted run exactly.
pub fn resume<T: Scalar>(mut state: Checkpoint<T>, dataset: &ImageSet, options: &TrainOptions) -> Result<TrainOutcome<T>> {
    let cfg = state.train_config.clone();
    cfg.validate()?;
    ensure!(!dataset.is_empty(), Protocol, "training dataset is empty");
    ensure!(
        dataset.channels == state.bundle.config.channels && dataset.size == state.bundle.config.image_size,
        Input,
        "dataset images are {}x{}x{}, the model expects {}x{}x{}",
        dataset.channels,
        dataset.size,
        dataset.size,
        state.bundle.config.channels,
        state.bundle.config.image_size,
        state.bundle.config.image_size
    );
    let steps_per_epoch = dataset.len() / cfg.batch_size;
    ensure!(
        steps_per_epoch >= 1,
        Protocol,
        "dataset of {} samples is smaller than one batch of {}",
        dataset.len(),
        cfg.batch_size
    );
    let total_steps = (steps_per_epoch * cfg.epochs) as f64;
    let plan = state.plan();
    let method = ScoreMethod::simple(plan.score)?;

    let mut log = match &options.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| YganError::io(dir, e))?;
            let path = dir.join("loss.csv");
            let fresh = state.step == 0 || !path.exists();
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| YganError::io(&path, e))?;
            Some(csv::WriterBuilder::new().has_headers(fresh).from_writer(file))
        }
        None => None,
    };

    let mut history = Vec::new();
    let mut validation_auc = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let last_epoch = options.stop_after_epoch.unwrap_or(cfg.epochs).min(cfg.epochs);
    while state.epoch < last_epoch {
        let epoch = state.epoch;
        for idx in batches(dataset.len(), cfg.batch_size, cfg.seed, epoch as u64, true) {
            let lambda_r = lambda_r_schedule(state.step as f64 / total_steps, cfg.lambda_r_gamma);
            let x = dataset.batch::<T>(&idx);
            let labels = dataset.labels_at(&idx);
            let losses = train_step(&mut state, &x, &labels, lambda_r)?;
            let record = StepRecord::new(state.step - 1, epoch + 1, &losses, lambda_r);
            if let Some(w) = log.as_mut() {
                w.serialize(&record)?;
            }
            history.push(record);
        }
        state.epoch += 1;
        let last = history.last().expect("at least one step per epoch");
        info!(
            "epoch {}/{} rec {:.4} adv {:.4} cls_s {:.4} cls_r {:.4} con {:.4} lambda_R {:.3}",
            state.epoch, cfg.epochs, last.rec, last.adv, last.cls_s, last.cls_r, last.con, last.lambda_r
        );
        if let Some(w) = log.as_mut() {
            w.flush().map_err(|e| YganError::io("loss.csv", e))?;
        }
        if let Some(val) = options.validation {
            let report = score_dataset(&state.bundle, val, &method, 256)?;
            let value = auc(&report.scores(), &report.labels())?;
            info!("epoch {} validation AUC {:.4}", state.epoch, value);
            validation_auc.push(value);
            if value > best {
                best = value;
                if let Some(dir) = &options.out_dir {
                    save_checkpoint(&state, &dir.join("best.ckpt"))?;
                }
            }
        }
        if let Some(dir) = &options.out_dir {
            save_checkpoint(&state, &dir.join("last.ckpt"))?;
        }
    }
    Ok(TrainOutcome {
        checkpoint: state,
        history,
        validation_auc,
    })
}
