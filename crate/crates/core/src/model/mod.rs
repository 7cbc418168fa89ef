//! The five Y-GAN networks: semantic and residual encoders, decoder,
//! discriminator and latent classifier.

mod networks;
mod reversal;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use networks::{Classifier, Decoder, Discriminator, Encoder};
pub use reversal::grad_reverse;

use crate::autograd::{Graph, NodeId, Scalar, Tensor};
use crate::error::{ensure, Result, YganError};
use crate::nn::{Mode, Network, ParamStore};

pub const SUPPORTED_IMAGE_SIZES: [usize; 4] = [32, 64, 128, 256];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub hidden_units: usize,
    pub base_filters: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            channels: 1,
            latent_dim: 100,
            num_classes: 9,
            hidden_units: 30,
            base_filters: 64,
        }
    }
}

impl ModelConfig {
    pub fn new(
        image_size: usize,
        channels: usize,
        latent_dim: usize,
        num_classes: usize,
        hidden_units: usize,
        base_filters: usize,
    ) -> Self {
        ModelConfig {
            image_size,
            channels,
            latent_dim,
            num_classes,
            hidden_units,
            base_filters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            SUPPORTED_IMAGE_SIZES.contains(&self.image_size),
            Config,
            "unsupported image_size {} (expected one of {:?})",
            self.image_size,
            SUPPORTED_IMAGE_SIZES
        );
        ensure!(
            self.channels == 1 || self.channels == 3,
            Config,
            "channels must be 1 or 3, got {}",
            self.channels
        );
        ensure!(self.latent_dim >= 1, Config, "latent_dim must be at least 1");
        ensure!(self.num_classes >= 2, Config, "num_classes must be at least 2");
        ensure!(self.hidden_units >= 1, Config, "hidden_units must be at least 1");
        ensure!(self.base_filters >= 1, Config, "base_filters must be at least 1");
        Ok(())
    }

    /// Stride-2 stages that take the image down to a 2x2 map.
    pub fn downsampling_stages(&self) -> usize {
        self.image_size.trailing_zeros() as usize - 1
    }

    /// Channel width of the last convolutional stage.
    pub fn top_filters(&self) -> usize {
        self.base_filters << (self.downsampling_stages() - 1)
    }

    /// Width of the discriminator feature vector used for feature matching.
    pub fn feature_dim(&self) -> usize {
        self.top_filters() * 2 * 2
    }

    pub fn image_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.channels, self.image_size, self.image_size]
    }
}

/// Structural switches that distinguish the ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Separate semantic and residual encoders; otherwise one shared encoder.
    pub dual_encoders: bool,
    /// Whether a residual code exists at all.
    pub residual_code: bool,
    pub classifier: bool,
    pub discriminator: bool,
}

impl Architecture {
    pub const FULL: Architecture = Architecture {
        dual_encoders: true,
        residual_code: true,
        classifier: true,
        discriminator: true,
    };

    fn validate(&self) -> Result<()> {
        ensure!(
            !self.dual_encoders || self.residual_code,
            Config,
            "dual encoders require a residual code"
        );
        Ok(())
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::FULL
    }
}

/// Latent codes of a batch, kept as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct CodeNodes {
    pub semantic: NodeId,
    pub residual: Option<NodeId>,
}

/// Discriminator outputs of a batch.
#[derive(Clone, Copy, Debug)]
pub struct CriticNodes {
    /// `(B,)` probabilities that the input is real.
    pub realness: NodeId,
    /// `(B, F)` flattened last-convolution activations.
    pub features: NodeId,
}

/// All parameters of a Y-GAN model plus its architecture.
#[derive(Clone, Debug)]
pub struct ModelBundle<T: Scalar> {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub store: ParamStore<T>,
    encoder_s: Encoder,
    encoder_r: Option<Encoder>,
    decoder: Decoder,
    discriminator: Option<Discriminator>,
    classifier: Option<Classifier>,
}

/// Builds the full Y-GAN with parameters drawn from `seed`.
pub fn build_networks<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelBundle<T>> {
    ModelBundle::build(config, Architecture::FULL, seed)
}

impl<T: Scalar> ModelBundle<T> {
    pub fn build(config: &ModelConfig, arch: Architecture, seed: u64) -> Result<Self> {
        config.validate()?;
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.latent_dim;
        let code_width = if arch.residual_code { 2 * d } else { d };
        let shared_width = if arch.dual_encoders { d } else { code_width };

        let encoder_s = Encoder::new(&mut store, Network::EncoderS, config, shared_width, &mut rng);
        let encoder_r = arch
            .dual_encoders
            .then(|| Encoder::new(&mut store, Network::EncoderR, config, d, &mut rng));
        let decoder = Decoder::new(&mut store, config, code_width, &mut rng);
        let discriminator = arch
            .discriminator
            .then(|| Discriminator::new(&mut store, config, &mut rng));
        let classifier = arch
            .classifier
            .then(|| Classifier::new(&mut store, config, &mut rng));
        Ok(ModelBundle {
            config: config.clone(),
            arch,
            store,
            encoder_s,
            encoder_r,
            decoder,
            discriminator,
            classifier,
        })
    }

    pub fn has_discriminator(&self) -> bool {
        self.discriminator.is_some()
    }

    pub fn has_classifier(&self) -> bool {
        self.classifier.is_some()
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        ensure!(
            shape.len() == 4
                && shape[0] > 0
                && shape[1] == c.channels
                && shape[2] == c.image_size
                && shape[3] == c.image_size,
            Input,
            "expected images of shape (B, {}, {}, {}), got {:?}",
            c.channels,
            c.image_size,
            c.image_size,
            shape
        );
        Ok(())
    }

    fn check_codes(&self, shape: &[usize], what: &str) -> Result<()> {
        ensure!(
            shape.len() == 2 && shape[0] > 0 && shape[1] == self.config.latent_dim,
            Input,
            "{} must have shape (B, {}), got {:?}",
            what,
            self.config.latent_dim,
            shape
        );
        Ok(())
    }

    /// Semantic and residual codes of an image batch.
    pub fn encode_nodes(&self, g: &mut Graph<T>, x: NodeId, mode: Mode) -> Result<CodeNodes> {
        self.check_images(g.shape(x))?;
        let d = self.config.latent_dim;
        let shared = self.encoder_s.forward(g, &self.store, x, mode)?;
        match (&self.encoder_r, self.arch.residual_code) {
            (Some(enc_r), _) => Ok(CodeNodes {
                semantic: shared,
                residual: Some(enc_r.forward(g, &self.store, x, mode)?),
            }),
            (None, true) => Ok(CodeNodes {
                semantic: g.slice_cols(shared, 0, d)?,
                residual: Some(g.slice_cols(shared, d, d)?),
            }),
            (None, false) => Ok(CodeNodes {
                semantic: shared,
                residual: None,
            }),
        }
    }

    /// Semantic code only; never evaluates the residual encoder.
    pub fn semantic_node(&self, g: &mut Graph<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        self.check_images(g.shape(x))?;
        let shared = self.encoder_s.forward(g, &self.store, x, mode)?;
        if self.encoder_r.is_none() && self.arch.residual_code {
            g.slice_cols(shared, 0, self.config.latent_dim)
        } else {
            Ok(shared)
        }
    }

    /// Decodes the concatenation `z_s ⊕ z_r` (or `z_s` alone without a residual code).
    pub fn decode_nodes(&self, g: &mut Graph<T>, z_s: NodeId, z_r: Option<NodeId>, mode: Mode) -> Result<NodeId> {
        self.check_codes(g.shape(z_s), "z_s")?;
        let z = match (z_r, self.arch.residual_code) {
            (Some(z_r), true) => {
                self.check_codes(g.shape(z_r), "z_r")?;
                ensure!(
                    g.shape(z_r)[0] == g.shape(z_s)[0],
                    Input,
                    "z_s and z_r batch sizes differ"
                );
                g.concat_cols(z_s, z_r)?
            }
            (None, false) => z_s,
            (Some(_), false) => {
                return Err(YganError::Input("this architecture has no residual code".into()))
            }
            (None, true) => return Err(YganError::Input("a residual code is required".into())),
        };
        self.decoder.forward(g, &self.store, z, mode)
    }

    pub fn critic_nodes(&self, g: &mut Graph<T>, x: NodeId, mode: Mode) -> Result<CriticNodes> {
        self.check_images(g.shape(x))?;
        let disc = self
            .discriminator
            .as_ref()
            .ok_or_else(|| YganError::Config("this architecture has no discriminator".into()))?;
        disc.forward(g, &self.store, x, mode)
    }

    pub fn classify_node(&self, g: &mut Graph<T>, z: NodeId) -> Result<NodeId> {
        self.check_codes(g.shape(z), "classifier input")?;
        let clf = self
            .classifier
            .as_ref()
            .ok_or_else(|| YganError::Config("this architecture has no classifier".into()))?;
        clf.forward(g, &self.store, z)
    }

    /// `E_s(x)` in evaluation mode.
    pub fn encode_semantic(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let z = self.semantic_node(&mut g, xn, Mode::Eval)?;
        Ok(g.value(z).clone())
    }

    /// `E_r(x)` in evaluation mode.
    pub fn encode_residual(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let codes = self.encode_nodes(&mut g, xn, Mode::Eval)?;
        let z = codes
            .residual
            .ok_or_else(|| YganError::Config("this architecture has no residual code".into()))?;
        Ok(g.value(z).clone())
    }

    /// Both codes in evaluation mode.
    pub fn encode(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let codes = self.encode_nodes(&mut g, xn, Mode::Eval)?;
        Ok((
            g.value(codes.semantic).clone(),
            codes.residual.map(|r| g.value(r).clone()),
        ))
    }

    /// `D(z_s ⊕ z_r)` in evaluation mode.
    pub fn decode(&self, z_s: &Tensor<T>, z_r: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let s = g.constant(z_s.clone());
        let r = z_r.map(|r| g.constant(r.clone()));
        let out = self.decode_nodes(&mut g, s, r, Mode::Eval)?;
        Ok(g.value(out).clone())
    }

    /// Full reconstruction `x̂` in evaluation mode.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let codes = self.encode_nodes(&mut g, xn, Mode::Eval)?;
        let out = self.decode_nodes(&mut g, codes.semantic, codes.residual, Mode::Eval)?;
        Ok(g.value(out).clone())
    }

    /// Realness `(B,)` and features `(B, F)` in evaluation mode.
    pub fn discriminate(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let out = self.critic_nodes(&mut g, xn, Mode::Eval)?;
        Ok((g.value(out.realness).clone(), g.value(out.features).clone()))
    }

    /// Unnormalized class logits `(B, N)`.
    pub fn classify(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let zn = g.constant(z.clone());
        let out = self.classify_node(&mut g, zn)?;
        Ok(g.value(out).clone())
    }

    /// Copies every entry of `other` with a matching name and shape.
    pub fn load_store(&mut self, other: &ParamStore<T>) -> Result<()> {
        for id in self.store.ids() {
            let name = self.store.entry(id).name.clone();
            let src = other
                .find(&name)
                .ok_or_else(|| YganError::Checkpoint(format!("missing array {name}")))?;
            let value = other.value(src);
            ensure!(
                value.shape() == self.store.value(id).shape(),
                Checkpoint,
                "array {} has shape {:?}, expected {:?}",
                name,
                value.shape(),
                self.store.value(id).shape()
            );
            *self.store.value_mut(id) = value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
