use rand::Rng;

use super::{CriticNodes, ModelConfig};
use crate::autograd::{Graph, NodeId, Scalar};
use crate::error::Result;
use crate::nn::layers::{BatchNorm, Conv2d, ConvTranspose2d, Linear};
use crate::nn::{Mode, Network, ParamStore};

const LEAKY_SLOPE: f64 = 0.2;
const KERNEL: usize = 4;

/// Stride-2 4x4 convolutions down to a 2x2 map, each followed by batch
/// normalization (optional) and a leaky rectifier.
#[derive(Clone, Debug)]
struct ConvStack {
    stages: Vec<(Conv2d, Option<BatchNorm>)>,
}

impl ConvStack {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        network: Network,
        config: &ModelConfig,
        normalize_first: bool,
        rng: &mut R,
    ) -> Self {
        let mut stages = Vec::new();
        let mut in_ch = config.channels;
        for i in 0..config.downsampling_stages() {
            let out_ch = config.base_filters << i;
            let name = format!("stage{i}");
            let conv = Conv2d::new(store, network, &format!("{name}.conv"), in_ch, out_ch, KERNEL, 2, 1, rng);
            let bn = (i > 0 || normalize_first)
                .then(|| BatchNorm::new(store, network, &format!("{name}.bn"), out_ch, rng));
            stages.push((conv, bn));
            in_ch = out_ch;
        }
        ConvStack { stages }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        let mut h = x;
        for (conv, bn) in &self.stages {
            h = conv.forward(g, store, h)?;
            if let Some(bn) = bn {
                h = bn.forward(g, store, h, mode)?;
            }
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        Ok(h)
    }
}

/// DCGAN-style encoder ending in a 2x2 projection to the code width.
#[derive(Clone, Debug)]
pub struct Encoder {
    body: ConvStack,
    projection: Conv2d,
    out_dim: usize,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        network: Network,
        config: &ModelConfig,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let body = ConvStack::new(store, network, config, true, rng);
        let projection = Conv2d::new(store, network, "projection", config.top_filters(), out_dim, 2, 1, 0, rng);
        Encoder {
            body,
            projection,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        let h = self.body.forward(g, store, x, mode)?;
        let z = self.projection.forward(g, store, h)?;
        let batch = g.shape(z)[0];
        g.reshape(z, &[batch, self.out_dim])
    }
}

/// Mirror of the encoder built from transposed convolutions, bounded by tanh.
#[derive(Clone, Debug)]
pub struct Decoder {
    stem: ConvTranspose2d,
    stem_bn: BatchNorm,
    stages: Vec<(ConvTranspose2d, BatchNorm)>,
    output: ConvTranspose2d,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &ModelConfig,
        in_dim: usize,
        rng: &mut R,
    ) -> Self {
        let net = Network::Decoder;
        let top = config.top_filters();
        let stem = ConvTranspose2d::new(store, net, "stem.deconv", in_dim, top, 2, 1, 0, rng);
        let stem_bn = BatchNorm::new(store, net, "stem.bn", top, rng);
        let mut stages = Vec::new();
        let mut ch = top;
        for i in 0..config.downsampling_stages() - 1 {
            let out = ch / 2;
            let name = format!("stage{i}");
            stages.push((
                ConvTranspose2d::new(store, net, &format!("{name}.deconv"), ch, out, KERNEL, 2, 1, rng),
                BatchNorm::new(store, net, &format!("{name}.bn"), out, rng),
            ));
            ch = out;
        }
        let output = ConvTranspose2d::new(store, net, "output.deconv", ch, config.channels, KERNEL, 2, 1, rng);
        Decoder {
            stem,
            stem_bn,
            stages,
            output,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: NodeId, mode: Mode) -> Result<NodeId> {
        let (batch, width) = (g.shape(z)[0], g.shape(z)[1]);
        let mut h = g.reshape(z, &[batch, width, 1, 1])?;
        h = self.stem.forward(g, store, h)?;
        h = self.stem_bn.forward(g, store, h, mode)?;
        h = g.relu(h);
        for (deconv, bn) in &self.stages {
            h = deconv.forward(g, store, h)?;
            h = bn.forward(g, store, h, mode)?;
            h = g.relu(h);
        }
        h = self.output.forward(g, store, h)?;
        Ok(g.tanh(h))
    }
}

/// Encoder-shaped critic; no normalization on its first layer.
#[derive(Clone, Debug)]
pub struct Discriminator {
    body: ConvStack,
    head: Conv2d,
}

impl Discriminator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: &ModelConfig, rng: &mut R) -> Self {
        let net = Network::Discriminator;
        let body = ConvStack::new(store, net, config, false, rng);
        let head = Conv2d::new(store, net, "head", config.top_filters(), 1, 2, 1, 0, rng);
        Discriminator { body, head }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId, mode: Mode) -> Result<CriticNodes> {
        let h = self.body.forward(g, store, x, mode)?;
        let features = g.flatten(h)?;
        let logit = self.head.forward(g, store, h)?;
        let batch = g.shape(logit)[0];
        let logit = g.reshape(logit, &[batch])?;
        Ok(CriticNodes {
            realness: g.sigmoid(logit),
            features,
        })
    }
}

/// Two-layer perceptron `d -> hidden -> N` over the semantic code.
#[derive(Clone, Debug)]
pub struct Classifier {
    hidden: Linear,
    output: Linear,
}

impl Classifier {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: &ModelConfig, rng: &mut R) -> Self {
        let net = Network::Classifier;
        Classifier {
            hidden: Linear::new(store, net, "hidden", config.latent_dim, config.hidden_units, rng),
            output: Linear::new(store, net, "output", config.hidden_units, config.num_classes, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: NodeId) -> Result<NodeId> {
        let h = self.hidden.forward(g, store, z)?;
        let h = g.relu(h);
        self.output.forward(g, store, h)
    }
}
