use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Which of the five networks an entry belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Network {
    EncoderS,
    EncoderR,
    Decoder,
    Discriminator,
    Classifier,
}

impl Network {
    pub fn prefix(self) -> &'static str {
        match self {
            Network::EncoderS => "encoder_s",
            Network::EncoderR => "encoder_r",
            Network::Decoder => "decoder",
            Network::Discriminator => "discriminator",
            Network::Classifier => "classifier",
        }
    }

    /// Networks updated by the generator objective.
    pub fn is_generator(self) -> bool {
        !matches!(self, Network::Discriminator)
    }
}

#[derive(Clone, Debug)]
pub struct Entry<T> {
    pub name: String,
    pub network: Network,
    /// Buffers (normalization running statistics) are stored but never optimized.
    pub trainable: bool,
    pub value: Tensor<T>,
}

/// Flat, ordered storage of every parameter and buffer of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, network: Network, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(Entry {
            name: format!("{}.{}", network.prefix(), name),
            network,
            trainable,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &Entry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Trainable parameters of the selected networks, in storage order.
    pub fn trainable(&self, select: impl Fn(Network) -> bool) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| {
                let e = self.entry(id);
                e.trainable && select(e.network)
            })
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars in a network.
    pub fn count(&self, network: Network) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.network == network)
            .map(|e| e.value.len())
            .sum()
    }
}
