use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::params::{Network, ParamId, ParamStore};
use crate::autograd::{Graph, NodeId, RunningUpdate, Scalar, Tensor};
use crate::error::Result;

/// Whether normalization layers use batch statistics (and update their
/// running averages) or the frozen running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

const INIT_STD: f64 = 0.02;

fn normal_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(mean, std).expect("valid normal");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64c(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

fn uniform_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid range");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64c(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        network: Network,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let w = normal_tensor(&[out_channels, in_channels, kernel, kernel], 0.0, INIT_STD, rng);
        Conv2d {
            weight: store.add(network, &format!("{name}.weight"), w, true),
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        g.conv2d(x, w, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        network: Network,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let w = normal_tensor(&[in_channels, out_channels, kernel, kernel], 0.0, INIT_STD, rng);
        ConvTranspose2d {
            weight: store.add(network, &format!("{name}.weight"), w, true),
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        g.conv_transpose2d(x, w, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        network: Network,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        BatchNorm {
            gamma: store.add(
                network,
                &format!("{name}.gamma"),
                normal_tensor(&[channels], 1.0, INIT_STD, rng),
                true,
            ),
            beta: store.add(network, &format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(
                network,
                &format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                false,
            ),
            running_var: store.add(
                network,
                &format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
                false,
            ),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, moments) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                let momentum = T::from_f64c(self.momentum);
                g.defer_running_update(RunningUpdate {
                    target: self.running_mean,
                    momentum,
                    observed: moments.mean,
                });
                g.defer_running_update(RunningUpdate {
                    target: self.running_var,
                    momentum,
                    observed: moments.var_unbiased,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.value(self.running_mean).data().to_vec();
                let var = store.value(self.running_var).data().to_vec();
                g.batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        network: Network,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: store.add(
                network,
                &format!("{name}.weight"),
                uniform_tensor(&[fan_out, fan_in], bound, rng),
                true,
            ),
            bias: store.add(
                network,
                &format!("{name}.bias"),
                uniform_tensor(&[fan_out], bound, rng),
                true,
            ),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}
